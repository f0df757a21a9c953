//! Versioned text checkpoints. Every float is written with 17 significant
//! digits, so a reload reproduces weights and optimizer state bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamW, OptimizerState, ParamStore, Schedule, Tensor};
use crate::textio::{fmt_f64, Reader};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Weights, optimizer state and training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation Overall seen so far.
    pub best_overall: Option<f64>,
}

fn write_tensor(out: &mut String, t: &Tensor) {
    for r in 0..t.rows() {
        let row: Vec<String> = t.row_slice(r).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn read_tensor(r: &mut Reader, rows: usize, cols: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut f = r.fields(cols)?;
        for _ in 0..cols {
            data.push(f.next_f64()?);
        }
    }
    Tensor::new(rows, cols, data)
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::from("uniseg3d-checkpoint\n");
        let c = &self.model.config;
        writeln!(out, "version {CHECKPOINT_FORMAT_VERSION}").unwrap();
        writeln!(out, "model {} {} {} {}", c.d_in, c.d_out, c.layers, c.heads).unwrap();
        writeln!(out, "epoch {}", self.epoch).unwrap();
        match self.best_overall {
            Some(b) => writeln!(out, "best_overall {}", fmt_f64(b)).unwrap(),
            None => out.push_str("best_overall none\n"),
        }
        let h = &self.optimizer.hyper;
        writeln!(
            out,
            "adamw {} {} {} {} {}",
            fmt_f64(h.lr0),
            fmt_f64(h.weight_decay),
            fmt_f64(h.beta1),
            fmt_f64(h.beta2),
            fmt_f64(h.eps)
        )
        .unwrap();
        match h.schedule {
            Schedule::Poly { total_steps, power } => {
                writeln!(out, "schedule poly {total_steps} {}", fmt_f64(power)).unwrap()
            }
            Schedule::Constant => out.push_str("schedule constant\n"),
        }
        writeln!(out, "step {}", self.optimizer.step).unwrap();
        writeln!(out, "params {}", self.model.params.len()).unwrap();
        for (name, p) in self.model.params.iter() {
            let [rows, cols] = p.value.shape();
            writeln!(out, "param {name} {rows} {cols} {}", u8::from(p.decay)).unwrap();
            write_tensor(&mut out, &p.value);
            for moments in [&self.optimizer.first, &self.optimizer.second] {
                let zero = Tensor::zeros(rows, cols);
                write_tensor(&mut out, moments.get(name).unwrap_or(&zero));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Reader::new(text);
        r.expect_line("uniseg3d-checkpoint")?;
        let version: u32 = r.keyed("version")?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "checkpoint",
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let mut f = r.fields(5)?;
        f.expect_token("model")?;
        let config = DecoderConfig {
            d_in: f.next_parse()?,
            d_out: f.next_parse()?,
            layers: f.next_parse()?,
            heads: f.next_parse()?,
        };
        config.validate()?;
        let epoch = r.keyed("epoch")?;
        let mut f = r.fields(2)?;
        f.expect_token("best_overall")?;
        let best_overall = match f.peek_token() {
            Some("none") => {
                f.next_token()?;
                None
            }
            _ => Some(f.next_f64()?),
        };
        let mut f = r.fields(6)?;
        f.expect_token("adamw")?;
        let (lr0, weight_decay) = (f.next_f64()?, f.next_f64()?);
        let (beta1, beta2, eps) = (f.next_f64()?, f.next_f64()?, f.next_f64()?);
        let mut f = r.any_fields()?;
        f.expect_token("schedule")?;
        let (offset, kind) = f.next_token()?;
        let schedule = match kind {
            "poly" if f.len() == 4 => Schedule::Poly {
                total_steps: f.next_parse()?,
                power: f.next_f64()?,
            },
            "constant" if f.len() == 2 => Schedule::Constant,
            _ => {
                return Err(Error::Parse {
                    offset,
                    message: format!("bad schedule {kind:?}"),
                })
            }
        };
        let step = r.keyed("step")?;
        let count: usize = r.keyed("params")?;
        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for _ in 0..count {
            let mut f = r.fields(5)?;
            f.expect_token("param")?;
            let (offset, name) = f.next_token()?;
            let (rows, cols): (usize, usize) = (f.next_parse()?, f.next_parse()?);
            let decay = match f.next_token()? {
                (_, "0") => false,
                (_, "1") => true,
                (o, t) => {
                    return Err(Error::Parse {
                        offset: o,
                        message: format!("bad decay flag {t:?}"),
                    })
                }
            };
            if params.param(name).is_some() {
                return Err(Error::Parse {
                    offset,
                    message: format!("duplicate parameter {name}"),
                });
            }
            params.insert_with(name, read_tensor(&mut r, rows, cols)?, decay);
            first.insert(name.to_string(), read_tensor(&mut r, rows, cols)?);
            second.insert(name.to_string(), read_tensor(&mut r, rows, cols)?);
        }
        r.expect_line("end")?;
        r.expect_eof()?;
        let hyper = AdamW {
            lr0,
            weight_decay,
            beta1,
            beta2,
            eps,
            schedule,
        };
        let fresh = Model::new(config, 0)?;
        for (name, p) in fresh.params.iter() {
            let loaded = params.param(name).ok_or_else(|| {
                Error::Lookup(format!("parameter {name} missing from checkpoint"))
            })?;
            if loaded.value.shape() != p.value.shape() {
                return Err(Error::shape("checkpoint", format!("parameter {name}")));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::contract("checkpoint has unexpected parameters"));
        }
        Ok(Self {
            model: Model { config, params },
            optimizer: OptimizerState {
                hyper,
                step,
                first,
                second,
            },
            epoch,
            best_overall,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    fn sample() -> Checkpoint {
        let cfg = DecoderConfig {
            d_in: 8,
            d_out: 12,
            layers: 1,
            heads: 2,
        };
        let mut model = Model::new(cfg, 4).unwrap();
        let mut opt =
            OptimizerState::new(AdamW::new(1e-3, 0.05, Schedule::poly(50)), &model.params);
        let grads = model
            .params
            .iter()
            .map(|(k, p)| {
                let [r, c] = p.value.shape();
                (
                    k.to_string(),
                    Tensor::randn(r, c, &mut rng::stream(7, k.len() as u64)),
                )
            })
            .collect();
        opt.step(&mut model.params, &grads).unwrap();
        Checkpoint {
            model,
            optimizer: opt,
            epoch: 3,
            best_overall: Some(1.0 / 3.0),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let text = c.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        let mut none = c.clone();
        none.best_overall = None;
        none.optimizer.hyper.schedule = Schedule::Constant;
        assert_eq!(Checkpoint::from_text(&none.to_text()).unwrap(), none);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
    }

    #[test]
    fn rejects_damaged_files() {
        let text = sample().to_text();
        let newer = text.replacen("version 1", "version 2", 1);
        assert!(matches!(
            Checkpoint::from_text(&newer),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
        let truncated = &text[..text.len() / 2];
        assert!(Checkpoint::from_text(truncated).is_err());
        let renamed = text.replacen("param backbone", "param nonsense", 1);
        assert!(Checkpoint::from_text(&renamed).is_err());
    }
}
