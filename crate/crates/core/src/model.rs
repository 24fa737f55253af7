//! Classification backbones whose final linear layer holds the shared
//! classification heads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::seed::Rng;
use crate::tensor::{sgd_step, Gradients, Graph, Parameter, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    SmallCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Hidden widths of the MLP.
    pub hidden: Vec<usize>,
    /// Output channels of each conv block of the small CNN.
    pub channels: Vec<usize>,
    /// Per-sample input shape: `[d]` for flat inputs, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    /// Total number of classification heads.
    pub num_heads: usize,
}

impl BackboneConfig {
    pub fn mlp(input_dim: usize, num_heads: usize) -> Self {
        Self {
            kind: BackboneKind::Mlp,
            hidden: vec![256, 128],
            channels: vec![],
            input_shape: vec![input_dim],
            num_heads,
        }
    }

    pub fn small_cnn(image: [usize; 3], num_heads: usize) -> Self {
        Self {
            kind: BackboneKind::SmallCnn,
            hidden: vec![],
            channels: vec![16, 32],
            input_shape: image.to_vec(),
            num_heads,
        }
    }

    /// Short hex digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(self)
    }

    fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::Config("backbone needs at least one head".into()));
        }
        match self.kind {
            BackboneKind::Mlp => {
                if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
                    return Err(Error::Config(format!("bad mlp input shape {:?}", self.input_shape)));
                }
            }
            BackboneKind::SmallCnn => {
                let [_, h, w] = self.input_shape[..] else {
                    return Err(Error::Config(format!(
                        "small_cnn needs a [c, h, w] input, got {:?}",
                        self.input_shape
                    )));
                };
                let shrink = 1usize << self.channels.len();
                if self.channels.is_empty() || h < shrink || w < shrink {
                    return Err(Error::Config(format!(
                        "{} pooling stages do not fit a {h}x{w} input",
                        self.channels.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn digest_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let hash = Sha256::digest(&json);
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Boolean selection over heads. Masked-out heads can never win an argmax.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadMask(pub Vec<bool>);

impl HeadMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn from_heads(n: usize, heads: impl IntoIterator<Item = usize>) -> Self {
        let mut m = vec![false; n];
        for h in heads {
            m[h] = true;
        }
        Self(m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }
}

/// Sets masked-out heads to `-inf`; active positions are copied unchanged.
pub fn masked_logits(logits: &Tensor, mask: &HeadMask) -> Result<Tensor> {
    let heads = logits.row_len();
    if logits.shape().len() != 2 || mask.len() != heads {
        return dim_err(format!(
            "mask of {} heads for logits {:?}",
            mask.len(),
            logits.shape()
        ));
    }
    if !mask.any() {
        return Err(Error::Usage("head mask selects no heads".into()));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(heads) {
        for (v, &keep) in row.iter_mut().zip(&mask.0) {
            if !keep {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    Ok(out)
}

/// Masked argmax per row.
pub fn predict(logits: &Tensor, mask: &HeadMask) -> Result<Vec<usize>> {
    Ok(masked_logits(logits, mask)?.argmax_rows())
}

/// Network parameters plus the graph wiring for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: BackboneConfig,
    params: Vec<Parameter>,
    seed: u64,
}

/// Result of recording a forward pass on a [`Graph`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    params: Vec<Var>,
}

const EVAL_CHUNK: usize = 256;

impl Model {
    pub fn new(config: BackboneConfig, seed: u64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        match config.kind {
            BackboneKind::Mlp => {
                let mut fan_in: usize = config.input_shape.iter().product();
                for &w in &config.hidden {
                    push_linear(&mut params, fan_in, w, rng);
                    fan_in = w;
                }
                push_linear(&mut params, fan_in, config.num_heads, rng);
            }
            BackboneKind::SmallCnn => {
                let [mut c, mut h, mut w] = [config.input_shape[0], config.input_shape[1], config.input_shape[2]];
                for &o in &config.channels {
                    let bound = (6.0 / (c * 9) as f64).sqrt();
                    params.push(Parameter::new(uniform(&[o, c, 3, 3], bound, rng)));
                    params.push(Parameter::new(Tensor::zeros(&[o])));
                    c = o;
                    h /= 2;
                    w /= 2;
                }
                push_linear(&mut params, c * h * w, config.num_heads, rng);
            }
        }
        Ok(Self {
            config,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_heads(&self) -> usize {
        self.params.last().map_or(0, |b| b.value.len())
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.learnable = false);
    }

    pub fn unfreeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.learnable = true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.learnable)
    }

    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.value.checksum())
    }

    /// Checksum of everything except the output layer.
    pub fn feature_checksum(&self) -> u64 {
        self.params[..self.params.len() - 2]
            .iter()
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.value.checksum())
    }

    /// Replaces the output layer with a freshly initialized one of `heads` units.
    pub fn reset_output(&mut self, heads: usize, rng: &mut Rng) {
        let n = self.params.len();
        let fan_in = self.params[n - 2].value.shape()[0];
        let learnable = self.params[n - 1].learnable;
        self.params.truncate(n - 2);
        push_linear(&mut self.params, fan_in, heads, rng);
        for p in &mut self.params[n - 2..] {
            p.learnable = learnable;
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != self.config.input_shape.len() + 1
            || input.shape()[1..] != self.config.input_shape[..]
        {
            return dim_err(format!(
                "input {:?} does not match per-sample shape {:?}",
                input.shape(),
                self.config.input_shape
            ));
        }
        Ok(())
    }

    /// Records a forward pass. Frozen parameters enter the graph as
    /// constants and so accumulate no gradient.
    pub fn forward(&self, g: &mut Graph, input: &Tensor) -> Result<Forward> {
        self.check_input(input)?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if p.learnable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let x = g.constant(input.clone());
        let logits = self.wire(g, x, &params)?;
        Ok(Forward { logits, params })
    }

    /// Gradient-free logits, evaluated in chunks.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let b = input.rows();
        if b <= EVAL_CHUNK {
            return self.logits_chunk(input);
        }
        let w = input.row_len();
        let mut parts = Vec::new();
        for start in (0..b).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(b);
            let mut shape = input.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, input.data()[start * w..end * w].to_vec())?;
            parts.push(self.logits_chunk(&chunk)?);
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn logits_chunk(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let consts: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let out = self.wire(&mut g, x, &consts)?;
        Ok(g.value(out).clone())
    }

    fn wire(&self, g: &mut Graph, mut x: Var, params: &[Var]) -> Result<Var> {
        let n = params.len();
        match self.config.kind {
            BackboneKind::Mlp => {
                x = g.flatten(x)?;
                for layer in params[..n - 2].chunks(2) {
                    x = g.matmul(x, layer[0])?;
                    x = g.add_bias(x, layer[1])?;
                    x = g.relu(x);
                }
            }
            BackboneKind::SmallCnn => {
                for layer in params[..n - 2].chunks(2) {
                    x = g.conv2d(x, layer[0], 1, 1)?;
                    x = g.add_bias(x, layer[1])?;
                    x = g.relu(x);
                    x = g.max_pool2d(x, 2)?;
                }
                x = g.flatten(x)?;
            }
        }
        x = g.matmul(x, params[n - 2])?;
        g.add_bias(x, params[n - 1])
    }

    /// Adds the gradients recorded for this model's parameters.
    pub fn accumulate(&mut self, fwd: &Forward, grads: &Gradients) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&fwd.params) {
            if let Some(g) = grads.get(*v) {
                p.accumulate(&g)?;
            }
        }
        Ok(())
    }

    /// One SGD update of the learnable parameters.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        sgd_step(self.params.iter_mut(), lr)
    }

    /// Writes shapes, parameters, seed and config digest to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(self.config.digest().as_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&[p.learnable as u8])?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let json_len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; json_len];
        read_exact(&mut r, &mut json)?;
        let config: BackboneConfig = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut digest = [0u8; 16];
        read_exact(&mut r, &mut digest)?;
        if digest != config.digest().as_bytes() {
            return Err(Error::Format("checkpoint config digest mismatch".into()));
        }
        let seed = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| read_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let mut p = Parameter::new(Tensor::new(shape, data)?);
            p.learnable = flag[0] != 0;
            params.push(p);
        }
        Ok(Self {
            config,
            params,
            seed,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"AUXCLCK1";

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn push_linear(params: &mut Vec<Parameter>, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    let bound = (6.0 / fan_in as f64).sqrt();
    params.push(Parameter::new(uniform(&[fan_in, fan_out], bound, rng)));
    params.push(Parameter::new(Tensor::zeros(&[fan_out])));
}
