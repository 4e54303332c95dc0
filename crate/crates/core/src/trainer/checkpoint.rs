//! Versioned text checkpoints: header lines, then named arrays each with a
//! `rows cols` shape and one line of values per row.

use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use crate::diffmath::rng::{seeded, Rng};
use crate::diffmath::{AdamState, Tensor};
use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "seqcomp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
    /// Seed of the run's generator and its position in the keystream.
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub val_mse: f64,
}

impl Checkpoint {
    pub fn rng(&self) -> Rng {
        let mut r = seeded(self.rng_seed);
        r.set_word_pos(self.rng_word_pos);
        r
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(w, "config {}", serde_json::to_string(&self.config)?);
        let _ = writeln!(w, "model {}", serde_json::to_string(&self.model.config)?);
        let _ = writeln!(w, "epoch {}", self.epoch);
        let _ = writeln!(w, "val_mse {:e}", self.val_mse);
        let _ = writeln!(w, "rng {} {}", self.rng_seed, self.rng_word_pos);
        let a = &self.adam;
        let _ = writeln!(w, "adam {} {:e} {:e} {:e} {:e}", a.step, a.lr, a.beta1, a.beta2, a.eps);
        let named = self.model.params.named();
        if a.m.len() != named.len() || a.v.len() != named.len() {
            return Err(Error::shape("checkpoint", &[a.m.len(), a.v.len()], &[named.len()]));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            write_array(w, "param", name, t);
            write_array(w, "adam_m", name, &a.m[i]);
            write_array(w, "adam_v", name, &a.v[i]);
        }
        let _ = writeln!(w, "end");
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut p = Reader {
            lines: text.lines().enumerate(),
            origin,
            line: 0,
        };
        let head = p.next_line()?;
        let version = head
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| p.err("not a checkpoint file"))?;
        if version != CHECKPOINT_VERSION {
            return Err(p.err(&format!("unsupported checkpoint version {version}")));
        }
        let config: TrainConfig = serde_json::from_str(p.field("config")?).map_err(|e| p.err(&e.to_string()))?;
        let model_cfg: ModelConfig = serde_json::from_str(p.field("model")?).map_err(|e| p.err(&e.to_string()))?;
        let epoch = p.field("epoch")?;
        let epoch = p.parse(epoch)?;
        let val_mse = p.field("val_mse")?;
        let val_mse = p.parse(val_mse)?;
        let rng = p.field("rng")?.split_whitespace().collect::<Vec<_>>();
        let [seed, pos] = rng[..] else {
            return Err(p.err("rng line needs seed and position"));
        };
        let (rng_seed, rng_word_pos) = (p.parse(seed)?, p.parse(pos)?);
        let adam_line = p.field("adam")?.split_whitespace().collect::<Vec<_>>();
        let [step, lr, b1, b2, eps] = adam_line[..] else {
            return Err(p.err("adam line needs five fields"));
        };

        let mut model = Model::new(model_cfg, &mut seeded(0))?;
        let n = model.params.named().len();
        let (mut params, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let names: Vec<String> = model.params.named().into_iter().map(|(s, _)| s).collect();
        for name in &names {
            params.push(p.array("param", name)?);
            m.push(p.array("adam_m", name)?);
            v.push(p.array("adam_v", name)?);
        }
        if p.next_line()? != "end" {
            return Err(p.err("expected `end`"));
        }
        model.params.set_tensors(params)?;
        let mut adam = AdamState::new(&[], p.parse(lr)?);
        adam.step = p.parse(step)?;
        adam.beta1 = p.parse(b1)?;
        adam.beta2 = p.parse(b2)?;
        adam.eps = p.parse(eps)?;
        adam.m = m;
        adam.v = v;
        Ok(Checkpoint {
            config,
            model,
            adam,
            epoch,
            rng_seed,
            rng_word_pos,
            val_mse,
        })
    }
}

fn write_array(w: &mut String, kind: &str, name: &str, t: &Tensor) {
    let _ = writeln!(w, "{kind} {name} {} {}", t.rows(), t.cols());
    for i in 0..t.rows() {
        let row: Vec<String> = t.row_slice(i).iter().map(|x| format!("{x:e}")).collect();
        let _ = writeln!(w, "{}", row.join(" "));
    }
}

struct Reader<'a, I> {
    lines: I,
    origin: &'a str,
    line: usize,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Reader<'a, I> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.origin.to_string(),
            line: self.line,
            msg: msg.to_string(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        let (i, l) = self.lines.next().ok_or_else(|| self.err("unexpected end of file"))?;
        self.line = i + 1;
        Ok(l)
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next_line()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(&format!("expected `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.trim().parse().map_err(|_| self.err(&format!("cannot parse {s:?}")))
    }

    fn array(&mut self, kind: &str, name: &str) -> Result<Tensor> {
        let head: Vec<&str> = self.field(kind)?.split_whitespace().collect();
        let [got, rows, cols] = head[..] else {
            return Err(self.err("array header needs name, rows and cols"));
        };
        if got != name {
            return Err(self.err(&format!("expected array {name}, found {got}")));
        }
        let (rows, cols): (usize, usize) = (self.parse(rows)?, self.parse(cols)?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let l = self.next_line()?;
            for tok in l.split_whitespace() {
                data.push(self.parse::<f64>(tok)?);
            }
        }
        if data.len() != rows * cols {
            return Err(self.err(&format!("array {name} has {} values, expected {}", data.len(), rows * cols)));
        }
        Tensor::new(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::rng::normal_tensor;
    use rand::RngCore;

    fn tiny() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.t_in = 16;
        config.t_out = 4;
        config.patch_len = 4;
        config.stride = 4;
        config.embed_dim = 8;
        config.heads = 2;
        config.d_ff = 8;
        let mut rng = seeded(5);
        let model = Model::new(config.model_config(2), &mut rng).unwrap();
        let mut adam = AdamState::new(&model.params.tensors(), 1e-3);
        adam.step = 7;
        adam.m[0] = normal_tensor(&mut rng, adam.m[0].rows(), adam.m[0].cols(), 1.0);
        Checkpoint {
            config,
            model,
            adam,
            epoch: 3,
            rng_seed: 5,
            rng_word_pos: rng.get_word_pos(),
            val_mse: 0.1 + 0.2,
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let ck = tiny();
        let back = Checkpoint::from_text(&ck.to_text().unwrap(), "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.val_mse.to_bits(), ck.val_mse.to_bits());
        let (mut a, mut b) = (ck.rng(), back.rng());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn rejects_damaged_files() {
        let text = tiny().to_text().unwrap();
        assert!(Checkpoint::from_text(&text.replace("seqcomp-checkpoint 1", "seqcomp-checkpoint 9"), "m").is_err());
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(matches!(Checkpoint::from_text(&truncated, "m"), Err(Error::Parse { .. })));
        assert!(Checkpoint::from_text(&text.replacen("param embed.w", "param embed.x", 1), "m").is_err());
    }
}
