//! Built-in dense models and their text weight format.
//!
//! ```text
//! linear <input_dims> <class_count>
//! <class_count rows of input_dims weights>
//! <bias: class_count values>
//! ```
//!
//! `mlp1 <input_dims> <hidden> <class_count>` is followed by the hidden layer's
//! matrix and bias, then the output layer's matrix and bias. Blank lines and
//! lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{softmax, ClassProbs, Oracle, OracleError};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp1,
}

/// Dense affine layer `W·x + b` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, OracleError> {
        if rows == 0 || cols == 0 {
            return Err(OracleError::InvalidModel(format!("empty layer {rows}x{cols}")));
        }
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(OracleError::InvalidModel(format!(
                "layer {rows}x{cols} needs {} weights and {rows} biases, got {} and {}",
                rows * cols,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Layer {
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn max_abs_weight(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltInModel {
    kind: ModelKind,
    layers: Vec<Layer>,
}

impl BuiltInModel {
    pub fn linear(layer: Layer) -> Self {
        BuiltInModel {
            kind: ModelKind::Linear,
            layers: vec![layer],
        }
    }

    pub fn mlp1(hidden: Layer, output: Layer) -> Result<Self, OracleError> {
        if output.cols != hidden.rows {
            return Err(OracleError::InvalidModel(format!(
                "output layer takes {} inputs but hidden layer has {} units",
                output.cols, hidden.rows
            )));
        }
        Ok(BuiltInModel {
            kind: ModelKind::Mlp1,
            layers: vec![hidden, output],
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dims(&self) -> usize {
        self.layers[0].cols
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            ModelKind::Linear => self.layers[0].apply(x),
            ModelKind::Mlp1 => {
                let hidden: Vec<f64> = self.layers[0].apply(x).into_iter().map(|h| h.max(0.0)).collect();
                self.layers[1].apply(&hidden)
            }
        }
    }

    /// Upper bound on the L1 Lipschitz constant of every class confidence.
    ///
    /// The softmax Jacobian has rows summing in absolute value to
    /// `2 p_c (1 − p_c) ≤ 1/2`, so `|∂N_c/∂x_j| ≤ ½ max_k |∂z_k/∂x_j|`. For a
    /// linear model that is `½ max|W|`; through a ReLU layer the logit
    /// derivative is bounded by `Σ_h |W2_kh| |W1_hj|`.
    pub fn lipschitz_bound_l1(&self) -> f64 {
        match self.kind {
            ModelKind::Linear => self.layers[0].max_abs_weight() / 2.0,
            ModelKind::Mlp1 => {
                let (w1, w2) = (&self.layers[0], &self.layers[1]);
                let mut worst: f64 = 0.0;
                for k in 0..w2.rows {
                    for j in 0..w1.cols {
                        let s: f64 = (0..w1.rows).map(|h| (w2.weight(k, h) * w1.weight(h, j)).abs()).sum();
                        worst = worst.max(s);
                    }
                }
                worst / 2.0
            }
        }
    }
}

impl Oracle for BuiltInModel {
    fn class_count(&self) -> usize {
        self.layers.last().expect("model has layers").rows
    }

    fn classify(&self, image: &Image) -> Result<ClassProbs, OracleError> {
        if image.dims() != self.input_dims() {
            return Err(OracleError::DimensionMismatch {
                expected: self.input_dims(),
                found: image.dims(),
            });
        }
        ClassProbs::new(softmax(&self.logits(image.data())))
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BuiltInModel, OracleError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| OracleError::Io {
        path: name.clone(),
        source,
    })?;
    parse_model(&text, &name)
}

pub fn save_model(model: &BuiltInModel, path: impl AsRef<Path>) -> Result<(), OracleError> {
    let path = path.as_ref();
    fs::write(path, format_model(model)).map_err(|source| OracleError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Serialises with shortest round-trip float formatting.
pub fn format_model(model: &BuiltInModel) -> String {
    let mut out = String::new();
    let l0 = &model.layers[0];
    match model.kind {
        ModelKind::Linear => writeln!(out, "linear {} {}", l0.cols, l0.rows),
        ModelKind::Mlp1 => writeln!(out, "mlp1 {} {} {}", l0.cols, l0.rows, model.layers[1].rows),
    }
    .expect("writing to a String");
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    for layer in &model.layers {
        for row in layer.weights.chunks_exact(layer.cols) {
            out.push_str(&join(row));
            out.push('\n');
        }
        out.push_str(&join(&layer.bias));
        out.push('\n');
    }
    out
}

pub fn parse_model(text: &str, path: &str) -> Result<BuiltInModel, OracleError> {
    let err = |line: usize, message: String| OracleError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (header_line, header) = lines.next().ok_or_else(|| err(1, "empty model file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let count = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| err(header_line, format!("expected a positive count, found '{s}'")))
    };
    let (kind, shapes) = match fields.as_slice() {
        ["linear", i, c] => (ModelKind::Linear, vec![(count(c)?, count(i)?)]),
        ["mlp1", i, h, c] => {
            let (i, h, c) = (count(i)?, count(h)?, count(c)?);
            (ModelKind::Mlp1, vec![(h, i), (c, h)])
        }
        [kind, ..] if *kind != "linear" && *kind != "mlp1" => {
            return Err(err(header_line, format!("unknown model kind '{kind}'")))
        }
        _ => {
            return Err(err(
                header_line,
                "expected 'linear <input_dims> <class_count>' or 'mlp1 <input_dims> <hidden> <class_count>'".into(),
            ))
        }
    };

    let body: Vec<(usize, &str)> = lines.collect();
    let expected_lines: usize = shapes.iter().map(|(rows, _)| rows + 1).sum();
    if body.len() != expected_lines {
        let layout = shapes
            .iter()
            .map(|(rows, _)| format!("{rows} matrix rows + 1 bias line"))
            .collect::<Vec<_>>()
            .join(", then ");
        let at = body.last().map_or(header_line, |b| b.0);
        return Err(err(
            at,
            format!("expected {expected_lines} data lines ({layout}), found {}", body.len()),
        ));
    }

    let mut body = body.into_iter();
    let mut layers = Vec::new();
    for (index, &(rows, cols)) in shapes.iter().enumerate() {
        let mut read_row = |len: usize, what: &str| -> Result<Vec<f64>, OracleError> {
            let (line, content) = body.next().expect("line count checked");
            let values = content
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(line, format!("non-numeric token '{t}'")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != len {
                return Err(err(
                    line,
                    format!("layer {} {what}: expected {len} values, found {}", index + 1, values.len()),
                ));
            }
            Ok(values)
        };
        let mut weights = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            weights.extend(read_row(cols, "matrix row")?);
        }
        let bias = read_row(rows, "bias")?;
        layers.push(Layer::new(rows, cols, weights, bias)?);
    }
    let mut layers = layers.into_iter();
    let first = layers.next().expect("at least one layer");
    match kind {
        ModelKind::Linear => Ok(BuiltInModel::linear(first)),
        ModelKind::Mlp1 => BuiltInModel::mlp1(first, layers.next().expect("two layers")),
    }
}
