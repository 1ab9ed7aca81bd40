//! Plain-text parameter checkpoints.
//!
//! ```text
//! cawcl-checkpoint 1
//! encoder_layers <L>
//! grl_scale <value>
//! tensor <name> <rows> <cols>
//! <cols values>            # one line per row
//! ...
//! ```
//!
//! Tensors appear in parameter order. Values are written in shortest
//! round-trip exponent notation, so a save/load cycle is exact.

use std::io::{BufRead, Write};

use super::{CameraClassifier, Dense, EncoderParams, IdentityClassifier, Model};
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "cawcl-checkpoint";
const VERSION: u32 = 1;

fn tensor_names(layers: usize) -> Vec<String> {
    let mut names = Vec::new();
    for k in 0..layers {
        names.push(format!("encoder.{k}.weight"));
        names.push(format!("encoder.{k}.bias"));
    }
    for head in ["identity", "camera"] {
        names.push(format!("{head}.weight"));
        names.push(format!("{head}.bias"));
    }
    names
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {VERSION}")?;
    writeln!(out, "encoder_layers {}", model.encoder.layers.len())?;
    writeln!(out, "grl_scale {:e}", model.camera.grl_scale)?;
    for (name, t) in tensor_names(model.encoder.layers.len())
        .iter()
        .zip(model.params())
    {
        writeln!(out, "tensor {name} {} {}", t.rows(), t.cols())?;
        for row in t.row_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    source: String,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.source.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(&self.source, e)),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<String>> {
        let l = self.next_line()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        Ok(parts.map(str::to_owned).collect())
    }
}

fn parse_num<T: std::str::FromStr, R: BufRead>(lines: &Lines<R>, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| lines.err(format!("bad number `{s}`")))
}

/// Reads a checkpoint written by [`write_checkpoint`]. `source` names the
/// input in error messages.
pub fn read_checkpoint<R: BufRead>(input: R, source: &str) -> Result<Model> {
    let mut lines = Lines {
        inner: input.lines(),
        source: source.to_owned(),
        line: 0,
    };
    let header = lines.keyed(CHECKPOINT_MAGIC)?;
    if header.first().map(String::as_str) != Some("1") {
        return Err(lines.err(format!("unsupported checkpoint version {header:?}")));
    }
    let layers: usize = match lines.keyed("encoder_layers")?.as_slice() {
        [n] => parse_num(&lines, n)?,
        _ => return Err(lines.err("malformed encoder_layers")),
    };
    if layers == 0 {
        return Err(lines.err("encoder needs at least one layer"));
    }
    let grl_scale: f64 = match lines.keyed("grl_scale")?.as_slice() {
        [v] => parse_num(&lines, v)?,
        _ => return Err(lines.err("malformed grl_scale")),
    };
    let mut tensors = Vec::new();
    for name in tensor_names(layers) {
        let fields = lines.keyed("tensor")?;
        let [n, r, c] = fields.as_slice() else {
            return Err(lines.err("malformed tensor header"));
        };
        if *n != name {
            return Err(lines.err(format!("expected tensor `{name}`, found `{n}`")));
        }
        let rows: usize = parse_num(&lines, r)?;
        let cols: usize = parse_num(&lines, c)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let l = lines.next_line()?;
            let before = data.len();
            for tok in l.split_whitespace() {
                data.push(parse_num::<f64, _>(&lines, tok)?);
            }
            if data.len() - before != cols {
                return Err(lines.err(format!("expected {cols} values")));
            }
        }
        tensors.push(Tensor2::from_vec(rows, cols, data)?);
    }
    let mut it = tensors.into_iter();
    let mut dense = || Dense {
        weight: it.next().expect("count fixed by tensor_names"),
        bias: it.next().expect("count fixed by tensor_names"),
    };
    let enc_layers: Vec<Dense> = (0..layers).map(|_| dense()).collect();
    let identity = IdentityClassifier { head: dense() };
    let camera = CameraClassifier {
        head: dense(),
        grl_scale,
    };
    for w in enc_layers.windows(2) {
        if w[0].fan_out() != w[1].fan_in() {
            return Err(Error::DimMismatch("encoder layer widths disagree".into()));
        }
    }
    let model = Model {
        encoder: EncoderParams { layers: enc_layers },
        identity,
        camera,
    };
    let f = model.feature_dim();
    let heads = [&model.identity.head, &model.camera.head];
    if heads
        .iter()
        .any(|h| h.fan_in() != f || h.bias.cols() != h.fan_out())
    {
        return Err(Error::DimMismatch(
            "classifier heads do not match feature width".into(),
        ));
    }
    if model
        .encoder
        .layers
        .iter()
        .any(|l| l.bias.cols() != l.fan_out())
    {
        return Err(Error::DimMismatch("encoder bias width".into()));
    }
    Ok(model)
}
