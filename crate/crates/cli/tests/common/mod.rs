#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use featgame::image::{save_image, Image};
use featgame::oracle::{save_model, BuiltInModel, Layer};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featgame"))
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_cmd(name: &str) -> String {
    format!("sh '{}'", fixture(name).display())
}

/// Two classes; class 1 wins when `w·x > threshold`.
pub fn halfspace(w: Vec<f64>, threshold: f64) -> BuiltInModel {
    let n = w.len();
    let mut weights = vec![0.0; n];
    weights.extend(w);
    BuiltInModel::linear(Layer::new(2, n, weights, vec![0.0, -threshold]).unwrap())
}

pub fn write_model(dir: &Path, name: &str, model: &BuiltInModel) -> PathBuf {
    let path = dir.join(name);
    save_model(model, &path).unwrap();
    path
}

pub fn write_image(dir: &Path, name: &str, image: &Image) -> PathBuf {
    let path = dir.join(name);
    save_image(image, &path).unwrap();
    path
}

pub fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().unwrap_or(-1),
        String::from_utf8_lossy(&stdout).into_owned(),
        String::from_utf8_lossy(&stderr).into_owned(),
    )
}

/// Value of `key=value` in `text`.
pub fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}
