//! Encoder, self-supervision projector and the expandable instance
//! classifier, all stored as named tensors in a [`ModelState`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vinil_tensor::{Tape, Tensor, Var};

use crate::datagen::mix_seed;
use crate::error::{Error, Result};

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// flatten → hidden affine+relu layers → affine to `embed_dim`
    Mlp,
    /// stride-2 3×3 conv+relu layers → global mean pool → affine to `embed_dim`
    SmallConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// `(channels, height, width)`
    pub input: (usize, usize, usize),
    /// Layer widths for `mlp`, channel counts for `smallconv`.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Mlp,
            input: (3, 32, 32),
            hidden: vec![256, 128],
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn small_conv() -> Self {
        EncoderConfig {
            kind: EncoderKind::SmallConv,
            hidden: vec![16, 32],
            ..EncoderConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// When false, self-supervised losses act on the embedding directly.
    pub use_projector: bool,
    pub projector_hidden: usize,
    pub projector_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            use_projector: true,
            projector_hidden: 256,
            projector_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim must be at least 2, got {}", e.embed_dim)));
        }
        if e.hidden.is_empty() || e.hidden.contains(&0) {
            return Err(Error::Config(format!("hidden widths must be nonempty and positive, got {:?}", e.hidden)));
        }
        let (c, h, w) = e.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input dims must be positive, got {:?}", e.input)));
        }
        if self.use_projector && (self.projector_hidden == 0 || self.projector_dim == 0) {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        Ok(())
    }

    /// Expected `(name, shape)` of every encoder and projector parameter.
    pub fn backbone_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = &self.encoder;
        let (c, h, w) = e.input;
        let mut out = Vec::new();
        let mut affine = |name: String, out_dim: usize, in_dim: usize| {
            out.push((format!("{name}.weight"), vec![out_dim, in_dim]));
            out.push((format!("{name}.bias"), vec![out_dim]));
        };
        match e.kind {
            EncoderKind::Mlp => {
                let mut width = c * h * w;
                for (i, &next) in e.hidden.iter().enumerate() {
                    affine(format!("encoder.{i}"), next, width);
                    width = next;
                }
                affine(format!("encoder.{}", e.hidden.len()), e.embed_dim, width);
            }
            EncoderKind::SmallConv => {
                affine("encoder.head".into(), e.embed_dim, *e.hidden.last().unwrap_or(&c));
            }
        }
        if e.kind == EncoderKind::SmallConv {
            let mut ch = c;
            for (i, &next) in e.hidden.iter().enumerate() {
                out.push((format!("encoder.conv{i}.weight"), vec![next, ch, 3, 3]));
                out.push((format!("encoder.conv{i}.bias"), vec![next]));
                ch = next;
            }
        }
        if self.use_projector {
            out.push(("projector.0.weight".into(), vec![self.projector_hidden, e.embed_dim]));
            out.push(("projector.0.bias".into(), vec![self.projector_hidden]));
            out.push(("projector.1.weight".into(), vec![self.projector_dim, self.projector_hidden]));
            out.push(("projector.1.bias".into(), vec![self.projector_dim]));
        }
        out.sort();
        out
    }
}

const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

/// Parameters of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    num_instances: usize,
}

/// Parameter handles placed on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

impl ModelState {
    /// Uniform `±1/√fan_in` initialization for every weight and bias; the
    /// classifier starts empty.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1417, 0));
        let shapes = config.backbone_shapes();
        // weights first so biases never shift the weight draws
        let mut params = BTreeMap::new();
        for (name, shape) in shapes.iter().filter(|(n, _)| n.ends_with(".weight")) {
            let bound = 1.0 / (fan_in(shape) as f64).sqrt();
            params.insert(name.clone(), uniform(&mut rng, shape, bound));
        }
        for (name, shape) in shapes.iter().filter(|(n, _)| n.ends_with(".bias")) {
            let weight = &shapes.iter().find(|(n, _)| *n == name.replace(".bias", ".weight")).expect("paired").1;
            let bound = 1.0 / (fan_in(weight) as f64).sqrt();
            params.insert(name.clone(), uniform(&mut rng, shape, bound));
        }
        Ok(ModelState { config, params, num_instances: 0 })
    }

    /// Rebuilds a model from stored tensors, checking every name and shape
    /// against `config`.
    pub fn from_params(config: ModelConfig, mut params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let embed = config.encoder.embed_dim;
        let mut num_instances = 0;
        match (params.get(CLASSIFIER_WEIGHT), params.get(CLASSIFIER_BIAS)) {
            (Some(w), Some(b)) => {
                let n = w.shape()[0];
                if w.shape() != [n, embed] || b.shape() != [n] {
                    return Err(Error::Model(format!(
                        "classifier shapes {:?} / {:?} do not fit embed_dim {embed}",
                        w.shape(),
                        b.shape()
                    )));
                }
                num_instances = n;
            }
            (None, None) => {}
            _ => return Err(Error::Model("classifier weight and bias must be stored together".into())),
        }
        for (name, shape) in config.backbone_shapes() {
            match params.get(&name) {
                None => return Err(Error::Model(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Model(format!(
                        "parameter `{name}` has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let expected = config.backbone_shapes().len() + if num_instances > 0 { 2 } else { 0 };
        if params.len() != expected {
            let known: Vec<String> = config.backbone_shapes().into_iter().map(|(n, _)| n).collect();
            params.retain(|k, _| !known.contains(k) && !k.starts_with("classifier."));
            let extra: Vec<&String> = params.keys().collect();
            return Err(Error::Model(format!("unexpected parameters {extra:?}")));
        }
        Ok(ModelState { config, params, num_instances })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.encoder.embed_dim
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Model(format!("no parameter `{name}`")))
    }

    /// Puts parameters on `tape`; those selected by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = self.config.encoder.input;
        match shape {
            [_, sc, sh, sw] if (*sc, *sh, *sw) == (c, h, w) => Ok(()),
            _ => Err(Error::Model(format!("batch shape {shape:?} does not match encoder input [B, {c}, {h}, {w}]"))),
        }
    }

    /// `[B,C,H,W] -> [B,D]` on the tape.
    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.check_batch(tape.shape(x))?;
        let e = &self.config.encoder;
        match e.kind {
            EncoderKind::Mlp => {
                let mut h = tape.flatten(x)?;
                for i in 0..=e.hidden.len() {
                    let w = bound.var(&format!("encoder.{i}.weight"))?;
                    let b = bound.var(&format!("encoder.{i}.bias"))?;
                    h = tape.affine(h, w, b)?;
                    if i < e.hidden.len() {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            EncoderKind::SmallConv => {
                let mut h = x;
                for i in 0..e.hidden.len() {
                    let w = bound.var(&format!("encoder.conv{i}.weight"))?;
                    let b = bound.var(&format!("encoder.conv{i}.bias"))?;
                    h = tape.conv2d(h, w, b, CONV_STRIDE, CONV_PAD)?;
                    h = tape.relu(h)?;
                }
                let pooled = tape.mean_pool(h)?;
                let w = bound.var("encoder.head.weight")?;
                let b = bound.var("encoder.head.bias")?;
                Ok(tape.affine(pooled, w, b)?)
            }
        }
    }

    /// `[B,D] -> [B,P]`; the identity when the projector is disabled.
    pub fn project_on(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        if !self.config.use_projector {
            return Ok(h);
        }
        let hidden = tape.affine(h, bound.var("projector.0.weight")?, bound.var("projector.0.bias")?)?;
        let hidden = tape.relu(hidden)?;
        Ok(tape.affine(hidden, bound.var("projector.1.weight")?, bound.var("projector.1.bias")?)?)
    }

    /// `[B,D] -> [B,N]` instance logits.
    pub fn classify_on(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        if self.num_instances == 0 {
            return Err(Error::Model("classifier has no instances registered".into()));
        }
        Ok(tape.affine(h, bound.var(CLASSIFIER_WEIGHT)?, bound.var(CLASSIFIER_BIAS)?)?)
    }

    fn infer(&self, input: &Tensor, f: impl Fn(&Self, &mut Tape, &Bound, Var) -> Result<Var>) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape, |_| false);
        let x = tape.constant(input.clone());
        let out = f(self, &mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }

    /// Embeddings for a `[B,C,H,W]` batch.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        self.infer(batch, Self::encode_on)
    }

    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        self.infer(h, Self::project_on)
    }

    pub fn classify(&self, h: &Tensor) -> Result<Tensor> {
        self.infer(h, Self::classify_on)
    }

    /// Appends `n_new` classifier rows drawn from `uniform(±1/√D)`. Existing
    /// rows are left untouched.
    pub fn expand_classifier(&mut self, n_new: usize, seed: u64) -> Result<()> {
        if n_new == 0 {
            return Err(Error::Model("expand_classifier needs at least one new instance".into()));
        }
        let d = self.embed_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC1A5, self.num_instances as u64));
        let new_w = uniform(&mut rng, &[n_new, d], bound);
        let new_b = uniform(&mut rng, &[n_new], bound);
        let (w, b) = match (self.params.get(CLASSIFIER_WEIGHT), self.params.get(CLASSIFIER_BIAS)) {
            (Some(w), Some(b)) => (w.concat_rows(&new_w)?, b.concat_rows(&new_b)?),
            _ => (new_w, new_b),
        };
        self.params.insert(CLASSIFIER_WEIGHT.into(), w);
        self.params.insert(CLASSIFIER_BIAS.into(), b);
        self.num_instances += n_new;
        Ok(())
    }
}

pub fn is_classifier(name: &str) -> bool {
    name.starts_with("classifier.")
}

pub fn is_projector(name: &str) -> bool {
    name.starts_with("projector.")
}
