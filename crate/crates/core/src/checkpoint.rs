//! Portable text checkpoints.
//!
//! ```text
//! lifted-checkpoint 1
//! layer_dims 784 256 256 10
//! activations relu relu linear
//! use_bias false
//! W0 256 784
//! <256 lines of 784 numbers>
//! b0 256            (only with use_bias)
//! <one line of 256 numbers>
//! ...
//! ```
//!
//! Numbers use the shortest representation that parses back to the same
//! `f64`, so a save/load round trip is bit-exact.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::network::{Activation, Architecture, NetworkParams};

const HEADER: &str = "lifted-checkpoint 1";

fn act_name(a: Activation) -> &'static str {
    match a {
        Activation::Linear => "linear",
        Activation::Relu => "relu",
    }
}

fn write_row<'a, W: Write>(out: &mut W, values: impl Iterator<Item = &'a f64>) -> std::io::Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            out.write_all(b" ")?;
        }
        write!(out, "{v}")?;
        first = false;
    }
    out.write_all(b"\n")
}

pub fn save_checkpoint<W: Write>(params: &NetworkParams, mut out: W) -> Result<()> {
    let arch = params.arch();
    writeln!(out, "{HEADER}")?;
    let dims: Vec<String> = arch.layer_dims().iter().map(|d| d.to_string()).collect();
    writeln!(out, "layer_dims {}", dims.join(" "))?;
    let acts: Vec<&str> = arch.activations().iter().map(|&a| act_name(a)).collect();
    writeln!(out, "activations {}", acts.join(" "))?;
    writeln!(out, "use_bias {}", arch.use_bias())?;
    for (k, w) in params.weights.iter().enumerate() {
        writeln!(out, "W{k} {} {}", w.nrows(), w.ncols())?;
        for row in w.rows() {
            write_row(&mut out, row.iter())?;
        }
        if let Some(b) = params.biases.as_ref().map(|b| &b[k]) {
            writeln!(out, "b{k} {}", b.len())?;
            write_row(&mut out, b.iter())?;
        }
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(Error::Checkpoint(format!("unexpected end of file at line {}", self.line))),
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("line {}: {msg}", self.line))
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<String>> {
        let l = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}`")));
        }
        Ok(parts.map(str::to_string).collect())
    }

    fn numbers(&mut self, n: usize) -> Result<Vec<f64>> {
        let l = self.next()?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| self.err(e))?;
        if v.len() != n {
            return Err(self.err(format!("expected {n} numbers, found {}", v.len())));
        }
        Ok(v)
    }
}

fn parse_usize(s: &str, lines: &Lines<impl BufRead>) -> Result<usize> {
    s.parse().map_err(|e| lines.err(e))
}

pub fn load_checkpoint<R: BufRead>(input: R) -> Result<NetworkParams> {
    let mut lines = Lines {
        inner: input.lines(),
        line: 0,
    };
    if lines.next()?.trim() != HEADER {
        return Err(lines.err("not a checkpoint (bad header)"));
    }
    let dims = lines
        .keyed("layer_dims")?
        .iter()
        .map(|s| parse_usize(s, &lines))
        .collect::<Result<Vec<_>>>()?;
    let acts = lines
        .keyed("activations")?
        .iter()
        .map(|s| match s.as_str() {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            other => Err(lines.err(format!("unknown activation `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let bias = match lines.keyed("use_bias")?.as_slice() {
        [b] if b == "true" => true,
        [b] if b == "false" => false,
        _ => return Err(lines.err("use_bias must be true or false")),
    };
    let arch = Architecture::new(dims.clone(), acts, bias)?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for k in 0..arch.num_layers() {
        let shape = lines.keyed(&format!("W{k}"))?;
        let (r, c) = match shape.as_slice() {
            [r, c] => (parse_usize(r, &lines)?, parse_usize(c, &lines)?),
            _ => return Err(lines.err("expected matrix shape")),
        };
        if (r, c) != (dims[k + 1], dims[k]) {
            return Err(lines.err(format!("W{k} has shape {r}x{c}, expected {}x{}", dims[k + 1], dims[k])));
        }
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r {
            data.extend(lines.numbers(c)?);
        }
        weights.push(Array2::from_shape_vec((r, c), data).expect("row lengths checked"));
        if bias {
            let n = match lines.keyed(&format!("b{k}"))?.as_slice() {
                [n] => parse_usize(n, &lines)?,
                _ => return Err(lines.err("expected bias length")),
            };
            biases.push(Array1::from(lines.numbers(n)?));
        }
    }
    NetworkParams::from_parts(arch, weights, bias.then_some(biases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, InitScheme};

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Architecture::mlp(&[5, 4, 3], Activation::Relu, Activation::Linear, true).unwrap();
        let mut p = init_params(&arch, 9, InitScheme::Gaussian { sigma: 1.3 });
        p.biases.as_mut().unwrap()[0][2] = 1e-300;
        p.weights[1][(0, 0)] = -0.1 - 0.2;
        let mut buf = Vec::new();
        save_checkpoint(&p, &mut buf).unwrap();
        let q = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_corrupt_files() {
        let arch = Architecture::mlp(&[2, 2], Activation::Linear, Activation::Linear, false).unwrap();
        let p = init_params(&arch, 1, InitScheme::KaimingUniform);
        let mut buf = Vec::new();
        save_checkpoint(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(load_checkpoint(text.replace("W0 2 2", "W0 2 3").as_bytes()).is_err());
        let cut = text.rfind('\n').unwrap();
        let last_line_start = text[..cut].rfind('\n').unwrap();
        assert!(load_checkpoint(&text.as_bytes()[..last_line_start + 1]).is_err());
        assert!(load_checkpoint("hello\n".as_bytes()).is_err());
    }
}
