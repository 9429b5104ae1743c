//! Triplet datasets in the Vimeo90K directory layout:
//! `<root>/sequences/<group>/<clip>/im{1,2,3}.png` plus a list file naming
//! one `<group>/<clip>` per line.

use std::fs;
use std::path::{Path, PathBuf};

use super::image::load_image;
use crate::error::{ensure_arg, Error, Result};
use crate::tensor::Tensor;

pub const FRAME_NAMES: [&str; 3] = ["im1.png", "im2.png", "im3.png"];

/// Location of one triplet on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletRef {
    /// Sequence name as written in the list file.
    pub id: String,
    pub dir: PathBuf,
}

impl TripletRef {
    pub fn frame_path(&self, i: usize) -> PathBuf {
        self.dir.join(FRAME_NAMES[i])
    }
}

/// Two input frames and the ground-truth middle frame, each `1x3xHxW`.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub id: String,
    pub frame0: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub frame1: Tensor<f32>,
}

impl Triplet {
    pub fn new(
        id: impl Into<String>,
        frame0: Tensor<f32>,
        gt: Tensor<f32>,
        frame1: Tensor<f32>,
    ) -> Result<Self> {
        let s = gt.shape();
        ensure_arg!(
            frame0.shape() == s && frame1.shape() == s,
            "triplet frames differ in size: {} / {s} / {}",
            frame0.shape(),
            frame1.shape()
        );
        Ok(Triplet {
            id: id.into(),
            frame0,
            gt,
            frame1,
        })
    }
}

/// Lists the triplets named by `list_file`, in file order. Blank lines are
/// skipped. Every listed sequence must contain all three frames.
pub fn scan_dataset(
    root: impl AsRef<Path>,
    list_file: impl AsRef<Path>,
) -> Result<Vec<TripletRef>> {
    let (root, list_file) = (root.as_ref(), list_file.as_ref());
    let text = fs::read_to_string(list_file).map_err(|e| Error::io(list_file, e))?;
    let sequences = root.join("sequences");
    let mut refs = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let dir = sequences.join(line);
        if !dir.is_dir() {
            return Err(Error::format(
                &dir,
                format!(
                    "sequence {line} listed in {} does not exist",
                    list_file.display()
                ),
            ));
        }
        let t = TripletRef {
            id: line.to_string(),
            dir,
        };
        for i in 0..3 {
            let p = t.frame_path(i);
            if !p.is_file() {
                return Err(Error::format(
                    &p,
                    format!(
                        "incomplete triplet: sequence {line} is missing {}",
                        FRAME_NAMES[i]
                    ),
                ));
            }
        }
        refs.push(t);
    }
    Ok(refs)
}

/// Reads the three frames of a triplet. `im2` is the ground truth.
pub fn load_triplet(r: &TripletRef) -> Result<Triplet> {
    let frames = (0..3)
        .map(|i| load_image(r.frame_path(i)))
        .collect::<Result<Vec<_>>>()?;
    let [frame0, gt, frame1]: [Tensor<f32>; 3] = frames.try_into().expect("three frames");
    Triplet::new(r.id.clone(), frame0, gt, frame1)
        .map_err(|e| Error::format(&r.dir, format!("sequence {}: {e}", r.id)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::save_image;

    fn write_sequence(root: &Path, name: &str, frames: usize) {
        let dir = root.join("sequences").join(name);
        fs::create_dir_all(&dir).unwrap();
        let img = Tensor::<f32>::full([1, 3, 4, 4], 0.5);
        for f in &FRAME_NAMES[..frames] {
            save_image(&img, dir.join(f)).unwrap();
        }
    }

    #[test]
    fn scan_keeps_list_order() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["00001/0002", "00001/0001", "00002/0001"] {
            write_sequence(dir.path(), s, 3);
        }
        let list = dir.path().join("list.txt");
        fs::write(&list, "00002/0001\n\n00001/0001\n00001/0002\n").unwrap();
        let refs = scan_dataset(dir.path(), &list).unwrap();
        let ids: Vec<_> = refs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["00002/0001", "00001/0001", "00001/0002"]);
        let t = load_triplet(&refs[0]).unwrap();
        assert_eq!(t.gt.shape(), crate::Shape::new(1, 3, 4, 4));
    }

    #[test]
    fn missing_frame_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), "00001/0001", 2);
        let list = dir.path().join("list.txt");
        fs::write(&list, "00001/0001\n").unwrap();
        let err = scan_dataset(dir.path(), &list).unwrap_err().to_string();
        assert!(err.contains("incomplete triplet"), "{err}");
        assert!(err.contains("00001/0001"), "{err}");
    }
}
