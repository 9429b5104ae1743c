//! File formats and dataset handling against hand-built fixtures.

use std::fs;

use pmcrnet::data::checkpoint::encode_checkpoint;
use pmcrnet::data::flowviz::{flow_to_color, read_flow_f32, write_flow_f32};
use pmcrnet::data::synthetic::write_synthetic_dataset;
use pmcrnet::data::{
    load_checkpoint, load_checkpoint_with, load_image, load_triplet, save_checkpoint, save_image,
    scan_dataset,
};
use pmcrnet::model::{ModelConfig, Pmcrnet};
use pmcrnet::train::{train, TrainConfig};
use pmcrnet::{Error, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_width: 12,
        ..ModelConfig::default()
    }
}

#[test]
fn png_and_ppm_round_trip_through_8_bit_levels() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::<f32>::from_fn([1, 3, 5, 7], |_, c, y, x| {
        ((c * 35 + y * 7 + x) % 256) as f32 / 255.0 + 0.001
    });
    for name in ["a.png", "a.ppm"] {
        let p = dir.path().join(name);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            // Nearest 8-bit level, computed independently.
            let level = (*a as f64 * 255.0).round() / 255.0;
            assert!((*b as f64 - level).abs() < 1e-7, "{name}: {a} -> {b}");
        }
    }
    let ppm = fs::read(dir.path().join("a.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n7 5\n255\n"));
    assert_eq!(ppm.len(), 11 + 5 * 7 * 3);
}

#[test]
fn grayscale_png_expands_to_rgb_and_16_bit_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let gray = dir.path().join("g.png");
    {
        let f = fs::File::create(&gray).unwrap();
        let mut enc = png::Encoder::new(f, 2, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()
            .unwrap()
            .write_image_data(&[0, 255])
            .unwrap();
    }
    let t = load_image(&gray).unwrap();
    assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

    let deep = dir.path().join("d.png");
    {
        let f = fs::File::create(&deep).unwrap();
        let mut enc = png::Encoder::new(f, 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.write_header()
            .unwrap()
            .write_image_data(&[0; 6])
            .unwrap();
    }
    let err = load_image(&deep).unwrap_err();
    assert!(
        matches!(err, Error::Format { .. }) && err.to_string().contains("16-bit"),
        "{err}"
    );
}

#[test]
fn missing_files_are_io_errors() {
    let err = load_image("/nonexistent/x.png").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/x.png"));
}

#[test]
fn synthetic_dataset_scans_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let list = write_synthetic_dataset(dir.path(), "list.txt", 3, 24, 40, 5).unwrap();
    let refs = scan_dataset(dir.path(), &list).unwrap();
    assert_eq!(
        refs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
        ["00001/0001", "00001/0002", "00001/0003"]
    );
    let t = load_triplet(&refs[1]).unwrap();
    assert_eq!(t.gt.shape().0, [1, 3, 24, 40]);

    fs::remove_file(refs[2].frame_path(2)).unwrap();
    let err = scan_dataset(dir.path(), &list).unwrap_err().to_string();
    assert!(
        err.contains("incomplete triplet") && err.contains("im3.png"),
        "{err}"
    );
}

#[test]
fn flow_dump_round_trips_and_is_planar() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.f32");
    let flow = Tensor::<f32>::from_fn([1, 2, 3, 4], |_, c, y, x| {
        (c * 100 + y * 10 + x) as f32 - 7.5
    });
    write_flow_f32(&flow, &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert_eq!(bytes.len(), 2 * 12 * 4);
    // First value of the vertical plane sits right after the 12 horizontal values.
    assert_eq!(f32::from_le_bytes(bytes[48..52].try_into().unwrap()), 92.5);
    assert_eq!(read_flow_f32(&p, 3, 4).unwrap().data(), flow.data());
    assert!(read_flow_f32(&p, 4, 4).is_err());
}

#[test]
fn flow_colors_follow_the_wheel() {
    // Rightward motion at full magnitude is pure red on the standard wheel.
    let right = Tensor::<f32>::from_fn([1, 2, 1, 1], |_, c, _, _| if c == 0 { 1.0 } else { 0.0 });
    let img = flow_to_color(&right).unwrap();
    assert_eq!(img.data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn checkpoint_failures_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let net = Pmcrnet::<f32>::new(small_config(), 1).unwrap();
    let good = dir.path().join("good.pmcr");
    save_checkpoint(&good, &net, None, 0, 0).unwrap();
    assert_eq!(
        fs::read(&good).unwrap(),
        encode_checkpoint(&net, None, 0, 0)
    );

    let bytes = fs::read(&good).unwrap();
    let cut = dir.path().join("cut.pmcr");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(
        load_checkpoint(&cut).unwrap_err(),
        Error::Io { .. }
    ));

    let junk = dir.path().join("junk.pmcr");
    fs::write(&junk, b"hello").unwrap();
    assert!(matches!(
        load_checkpoint(&junk).unwrap_err(),
        Error::Format { .. }
    ));

    let other = ModelConfig {
        ablate_csm: true,
        ..small_config()
    };
    assert!(load_checkpoint_with(&good, Some(&other)).is_err());
    let loaded = load_checkpoint(&good).unwrap();
    assert_eq!(loaded.model.config(), &small_config());
}

#[test]
fn training_writes_periodic_and_final_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let list = write_synthetic_dataset(dir.path(), "list.txt", 3, 32, 32, 9).unwrap();
    let refs = scan_dataset(dir.path(), &list).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch: 2,
        crop: 32,
        checkpoint_every: 1,
        model: small_config(),
        ..TrainConfig::default()
    };
    let out = dir.path().join("run");
    let mut log = Vec::new();
    let s = train(&cfg, refs.as_slice(), Some(&out), &mut log).unwrap();
    // ceil(3 / 2) steps per epoch.
    assert_eq!(s.records.len(), 4);
    for name in ["epoch0001.pmcr", "epoch0002.pmcr", "final.pmcr"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let resumed = load_checkpoint(out.join("final.pmcr")).unwrap();
    assert_eq!(resumed.step, 4);
    assert_eq!(resumed.optimizer.unwrap().step, 4);
    let text = String::from_utf8(log).unwrap();
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("step=0 epoch=0 lr=0.0001 tau=0.1 "));
}
