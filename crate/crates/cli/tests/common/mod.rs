#![allow(dead_code)]

use std::path::{Path, PathBuf};

use txst_core::checkpoint::Checkpoint;
use txst_core::data::build_manifest;
use txst_core::model::{Frozen, TxstNet};
use txst_core::optim::Adam;
use txst_core::trainer::{Preset, Scale, Stage, TrainConfig};

/// Desk fixtures plus an untrained stage-2 checkpoint over them.
pub fn desk_checkpoint(root: &Path) -> PathBuf {
    txst_core::fixtures::write_desk_fixtures(root).unwrap();
    let manifest = build_manifest(&root.join("content"), &root.join("style")).unwrap();
    manifest.write(&root.join("manifest.json")).unwrap();
    let cfg = TrainConfig::preset(Stage::Style, Preset::Artist, Scale::Desk);
    let frozen = Frozen::new(&cfg.model).unwrap();
    let net = TxstNet::new(&cfg.model).unwrap();
    let ck = Checkpoint::capture(
        &cfg,
        &frozen,
        &net,
        &Adam::new(),
        0,
        manifest.artist_names(),
    );
    let path = root.join("model.safetensors");
    ck.save(&path).unwrap();
    path
}

pub fn png_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}
