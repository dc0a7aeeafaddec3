//! Named parameter store, initialization, the AdamW step, and the
//! checkpoint file format (config echo + named little-endian f32 arrays).

use crate::error::{CrobimError, Result};
use crate::tape::{Graph, Var};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Insert every parameter into the graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut vars = IndexMap::new();
        for (name, value) in &self.entries {
            vars.insert(name.clone(), g.leaf(value.clone()));
        }
        BoundParams { vars }
    }

    /// Round every value to the nearest f32. Training state is kept exactly
    /// f32-representable so checkpoints round-trip losslessly.
    pub fn quantize_f32(&mut self) {
        for value in self.entries.values_mut() {
            value.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Graph handles for a bound parameter set.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collect named gradients after a backward pass; absent gradients
    /// (parameters not on the loss path) come back as zeros.
    pub fn gradients(
        &self,
        g: &Graph,
        grads: &crate::tape::Grads,
    ) -> IndexMap<String, ArrayD<f64>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let grad = grads
                    .get(*var)
                    .map(|a| a.as_standard_layout().to_owned())
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(g.shape(*var))));
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Glorot-uniform weight matrix.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-limit..limit))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Decoupled AdamW with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn apply(&mut self, params: &mut Params, grads: &IndexMap<String, ArrayD<f64>>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let value = params.get_mut(name);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
        // keep momentum state f32-exact alongside the parameters
        for buf in self.m.values_mut().chain(self.v.values_mut()) {
            buf.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

// ---- checkpoint format ----
//
// magic "CRBM", u32 version, u64 optimizer step,
// u32 config-echo byte length, echo bytes,
// u32 entry count, then per entry:
//   u16 name length, name bytes, u8 ndim, u64 dims..., f32 LE data.

const MAGIC: &[u8; 4] = b"CRBM";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config_echo: String,
    pub step: u64,
    pub arrays: IndexMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let echo = self.config_echo.as_bytes();
        buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        buf.extend_from_slice(echo);
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, value) in &self.arrays {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(value.ndim() as u8);
            for d in value.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CrobimError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CrobimError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let echo_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let config_echo = String::from_utf8(r.take(echo_len)?.to_vec())
            .map_err(|_| CrobimError::Checkpoint("config echo is not UTF-8".into()))?;
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut arrays = IndexMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CrobimError::Checkpoint("entry name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| CrobimError::Checkpoint(format!("bad array {name}: {e}")))?;
            arrays.insert(name, arr);
        }
        Ok(Checkpoint {
            config_echo,
            step,
            arrays,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CrobimError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Bundle model parameters and optimizer state into one checkpoint.
pub fn checkpoint_from_state(config_echo: String, params: &Params, opt: &AdamW) -> Checkpoint {
    let mut arrays = IndexMap::new();
    for (name, value) in params.iter() {
        arrays.insert(name.clone(), value.clone());
    }
    for (name, value) in &opt.m {
        arrays.insert(format!("opt.m.{name}"), value.clone());
    }
    for (name, value) in &opt.v {
        arrays.insert(format!("opt.v.{name}"), value.clone());
    }
    Checkpoint {
        config_echo,
        step: opt.step as u64,
        arrays,
    }
}

/// Split a loaded checkpoint back into parameters and optimizer state.
/// `template` supplies the expected names and shapes; mismatches are
/// reported with the offending dimensions.
pub fn state_from_checkpoint(
    ckpt: &Checkpoint,
    template: &Params,
    weight_decay: f64,
) -> Result<(Params, AdamW)> {
    let mut params = Params::new();
    let mut opt = AdamW::new(weight_decay);
    opt.step = ckpt.step as usize;
    for (name, expected) in template.iter() {
        let got = ckpt
            .arrays
            .get(name)
            .ok_or_else(|| CrobimError::Checkpoint(format!("missing parameter {name}")))?;
        if got.shape() != expected.shape() {
            return Err(CrobimError::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?} does not match config shape {:?}",
                got.shape(),
                expected.shape()
            )));
        }
        params.insert(name.clone(), got.clone());
    }
    for (name, value) in &ckpt.arrays {
        if let Some(p) = name.strip_prefix("opt.m.") {
            opt.m.insert(p.to_string(), value.clone());
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            opt.v.insert(p.to_string(), value.clone());
        }
    }
    Ok((params, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_collect_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        params.insert("w", glorot(&mut rng, 3, 2));
        params.insert("b", zeros(&[2]));
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(glorot(&mut rng, 4, 3));
        let wx = g.matmul(x, bound.var("w"));
        let y = g.add_bias_row(wx, bound.var("b"));
        let sq = g.mul(y, y);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        let named = bound.gradients(&g, &grads);
        assert_eq!(named["w"].shape(), &[3, 2]);
        assert_eq!(named["b"].shape(), &[2]);
        assert!(named["w"].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut params = Params::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = AdamW::new(0.0);
        for _ in 0..400 {
            let x = params.get("x")[[0]];
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), ArrayD::from_elem(IxDyn(&[1]), 2.0 * x));
            opt.apply(&mut params, &grads, 0.05);
        }
        assert!(params.get("x")[[0]].abs() < 1e-2);
    }

    #[test]
    fn checkpoint_roundtrip_exact_for_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        params.insert("a.w", glorot(&mut rng, 4, 5));
        params.insert("a.b", zeros(&[5]));
        params.quantize_f32();
        let opt = AdamW::new(0.01);
        let ckpt = checkpoint_from_state("model.seed = 0\n".into(), &params, &opt);
        let dir = std::env::temp_dir().join("crobim_ckpt_test");
        let path = dir.join("test.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config_echo, "model.seed = 0\n");
        let (restored, _) = state_from_checkpoint(&loaded, &params, 0.01).unwrap();
        for (name, value) in params.iter() {
            assert_eq!(restored.get(name), value, "lossy roundtrip for {name}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_shape_mismatch_reports_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Params::new();
        params.insert("w", glorot(&mut rng, 2, 2));
        let opt = AdamW::new(0.0);
        let ckpt = checkpoint_from_state(String::new(), &params, &opt);
        let mut template = Params::new();
        template.insert("w", zeros(&[3, 2]));
        let err = state_from_checkpoint(&ckpt, &template, 0.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3, 2]"), "{msg}");
    }
}
