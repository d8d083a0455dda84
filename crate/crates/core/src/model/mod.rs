//! Encoder-decoder pixel classifier.
//!
//! Encoder: `depth` stride-2 3x3 convolutions with ReLU, channels doubling from
//! `base_channels`. Decoder: one 2x2 stride-2 transposed convolution per stage,
//! with the matching encoder activation added back before the ReLU, then a 1x1
//! classifier head. Feature perturbation drops whole channels of every encoder
//! output the decoder consumes.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{Sgd, SgdConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ChannelDropout, Conv3x3S2, ConvT2x2, Pointwise, Real};
use crate::tensor::{Image, ProbabilityMap, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub feature_dropout_rate: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            num_classes: 6,
            base_channels: 16,
            depth: 3,
            feature_dropout_rate: 0.5,
            image_height: 64,
            image_width: 64,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes must be >= 2"));
        }
        if self.num_classes > 255 {
            return Err(Error::validation("num_classes must be < 255 (255 is IGNORE)"));
        }
        if self.depth < 1 {
            return Err(Error::validation("depth must be >= 1"));
        }
        if self.base_channels < 1 {
            return Err(Error::validation("base_channels must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.feature_dropout_rate) {
            return Err(Error::validation("feature_dropout_rate must lie in [0, 1)"));
        }
        let div = 1usize << self.depth;
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % div != 0
            || self.image_width % div != 0
        {
            return Err(Error::validation(format!(
                "image size {}x{} must be a positive multiple of 2^depth = {div}",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.image_height, self.image_width)
    }

    fn enc_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn dec_out_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.base_channels
        } else {
            self.enc_channels(stage - 1)
        }
    }

    /// Names and lengths of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for i in 0..self.depth {
            let cin = if i == 0 { 3 } else { self.enc_channels(i - 1) };
            let cout = self.enc_channels(i);
            out.push((format!("enc{i}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("enc{i}.bias"), vec![cout]));
        }
        for j in (0..self.depth).rev() {
            let cin = self.enc_channels(j);
            let cout = self.dec_out_channels(j);
            out.push((format!("dec{j}.weight"), vec![cout, 2, 2, cin]));
            out.push((format!("dec{j}.bias"), vec![cout]));
        }
        out.push(("head.weight".into(), vec![self.num_classes, self.base_channels]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

/// Parameter (or gradient) tensors in `param_layout` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros_like(config: &SegModelConfig) -> Self {
        ParamSet {
            tensors: config
                .param_layout()
                .iter()
                .map(|(_, shape)| vec![T::zero(); shape.iter().product()])
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.tensors.iter_mut().flatten()
    }
}

/// Activations kept from an encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    cols: Vec<Vec<T>>,
    /// Post-ReLU output of each stage.
    pub acts: Vec<Vec<T>>,
    /// Input spatial dims of each stage.
    dims: Vec<(usize, usize)>,
}

/// Activations kept from a decoder pass, plus its logits.
#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    /// Inputs of each decoder stage, indexed by stage.
    inputs: Vec<Vec<T>>,
    /// Post-ReLU outputs of each decoder stage, indexed by stage.
    outs: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T: Real = f32> {
    config: SegModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> SegModel<T> {
    pub fn new(config: SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .param_layout()
            .iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                if name.ends_with(".bias") {
                    return vec![T::zero(); len];
                }
                let fan_in = match name.split('.').next().unwrap_or("") {
                    n if n.starts_with("enc") => shape[1] * 9,
                    n if n.starts_with("dec") => shape[3],
                    _ => shape[1],
                };
                let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                (0..len).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
            })
            .collect();
        Ok(SegModel {
            config,
            params: ParamSet { tensors },
        })
    }

    pub fn from_params(config: SegModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.tensors.len()
            || layout
                .iter()
                .zip(&params.tensors)
                .any(|((_, s), t)| s.iter().product::<usize>() != t.len())
        {
            return Err(Error::contract("parameter tensors do not match the model layout"));
        }
        Ok(SegModel { config, params })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    fn enc_layer(&self, i: usize) -> Conv3x3S2 {
        Conv3x3S2 {
            cin: if i == 0 { 3 } else { self.config.enc_channels(i - 1) },
            cout: self.config.enc_channels(i),
        }
    }

    fn dec_layer(&self, j: usize) -> ConvT2x2 {
        ConvT2x2 {
            cin: self.config.enc_channels(j),
            cout: self.config.dec_out_channels(j),
        }
    }

    fn head_layer(&self) -> Pointwise {
        Pointwise {
            cin: self.config.base_channels,
            cout: self.config.num_classes,
        }
    }

    fn enc_idx(&self, i: usize) -> usize {
        2 * i
    }

    fn dec_idx(&self, j: usize) -> usize {
        2 * self.config.depth + 2 * (self.config.depth - 1 - j)
    }

    fn head_idx(&self) -> usize {
        4 * self.config.depth
    }

    /// Converts an image into the normalized network input.
    pub fn prepare_input(&self, image: &Image) -> Result<Vec<T>> {
        if image.shape != self.config.input_shape() {
            return Err(Error::contract(format!(
                "image is {}x{}, model expects {}x{}",
                image.shape.height, image.shape.width, self.config.image_height, self.config.image_width
            )));
        }
        Ok(image.data.iter().map(|&v| T::from_f64((v as f64 - 0.5) * 4.0)).collect())
    }

    pub fn encode(&self, input: &[T]) -> EncoderTrace<T> {
        let (mut h, mut w) = (self.config.image_height, self.config.image_width);
        let mut cols = Vec::with_capacity(self.config.depth);
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.config.depth);
        let mut dims = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            let layer = self.enc_layer(i);
            let k = self.enc_idx(i);
            let x = if i == 0 { input } else { &acts[i - 1] };
            let (mut out, c) = layer.forward(&self.params.tensors[k], &self.params.tensors[k + 1], x, h, w);
            relu(&mut out);
            dims.push((h, w));
            cols.push(c);
            acts.push(out);
            (h, w) = Conv3x3S2::out_dims(h, w);
        }
        EncoderTrace { cols, acts, dims }
    }

    /// Samples one channel-dropout mask per encoder stage.
    pub fn sample_feature_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<ChannelDropout<T>> {
        (0..self.config.depth)
            .map(|i| ChannelDropout::sample(self.config.enc_channels(i), self.config.feature_dropout_rate, rng))
            .collect()
    }

    pub fn decode(&self, enc: &EncoderTrace<T>, masks: Option<&[ChannelDropout<T>]>) -> DecoderTrace<T> {
        let d = self.config.depth;
        let feats: Vec<std::borrow::Cow<'_, [T]>> = enc
            .acts
            .iter()
            .enumerate()
            .map(|(i, a)| match masks {
                Some(m) => {
                    let mut v = a.clone();
                    m[i].apply(&mut v);
                    std::borrow::Cow::Owned(v)
                }
                None => std::borrow::Cow::Borrowed(a.as_slice()),
            })
            .collect();
        let mut inputs = vec![Vec::new(); d];
        let mut outs = vec![Vec::new(); d];
        let mut x: Vec<T> = feats[d - 1].to_vec();
        let (mut h, mut w) = Conv3x3S2::out_dims(enc.dims[d - 1].0, enc.dims[d - 1].1);
        for j in (0..d).rev() {
            let layer = self.dec_layer(j);
            let k = self.dec_idx(j);
            let mut y = layer.forward(&self.params.tensors[k], &self.params.tensors[k + 1], &x, h, w);
            if j > 0 {
                for (a, b) in y.iter_mut().zip(feats[j - 1].iter()) {
                    *a += *b;
                }
            }
            relu(&mut y);
            inputs[j] = std::mem::replace(&mut x, y.clone());
            outs[j] = y;
            h *= 2;
            w *= 2;
        }
        let n = self.config.image_height * self.config.image_width;
        let hi = self.head_idx();
        let logits = self
            .head_layer()
            .forward(&self.params.tensors[hi], &self.params.tensors[hi + 1], &x, n);
        DecoderTrace { inputs, outs, logits }
    }

    /// Back-propagates logit gradients through the decoder, accumulating into
    /// `grads`. Returns gradients w.r.t. the (possibly dropped) encoder features.
    pub fn backward_decoder(&self, dec: &DecoderTrace<T>, dlogits: &[T], grads: &mut ParamSet<T>) -> Vec<Vec<T>> {
        let d = self.config.depth;
        let n = self.config.image_height * self.config.image_width;
        let hi = self.head_idx();
        let (gw, rest) = grads.tensors[hi..].split_at_mut(1);
        let mut dx = self
            .head_layer()
            .backward(&self.params.tensors[hi], &dec.outs[0], dlogits, n, &mut gw[0], &mut rest[0]);
        let mut dfeat: Vec<Vec<T>> = vec![Vec::new(); d];
        let (mut h, mut w) = (self.config.image_height, self.config.image_width);
        for j in 0..d {
            for (g, &o) in dx.iter_mut().zip(&dec.outs[j]) {
                if o <= T::zero() {
                    *g = T::zero();
                }
            }
            if j > 0 {
                dfeat[j - 1] = dx.clone();
            }
            h /= 2;
            w /= 2;
            let k = self.dec_idx(j);
            let (gw, rest) = grads.tensors[k..].split_at_mut(1);
            dx = self.dec_layer(j).backward(
                &self.params.tensors[k],
                &dec.inputs[j],
                &dx,
                h,
                w,
                &mut gw[0],
                &mut rest[0],
            );
        }
        dfeat[d - 1] = dx;
        dfeat
    }

    /// Back-propagates encoder-feature gradients into the encoder parameters.
    pub fn backward_encoder(
        &self,
        enc: &EncoderTrace<T>,
        masks: Option<&[ChannelDropout<T>]>,
        mut dfeat: Vec<Vec<T>>,
        grads: &mut ParamSet<T>,
    ) {
        let d = self.config.depth;
        if let Some(m) = masks {
            for (g, mask) in dfeat.iter_mut().zip(m) {
                mask.apply(g);
            }
        }
        let mut carry: Option<Vec<T>> = None;
        for i in (0..d).rev() {
            let mut dact = std::mem::take(&mut dfeat[i]);
            if let Some(c) = carry.take() {
                for (a, b) in dact.iter_mut().zip(c) {
                    *a += b;
                }
            }
            for (g, &o) in dact.iter_mut().zip(&enc.acts[i]) {
                if o <= T::zero() {
                    *g = T::zero();
                }
            }
            let (h, w) = enc.dims[i];
            let k = self.enc_idx(i);
            let (gw, rest) = grads.tensors[k..].split_at_mut(1);
            carry = self.enc_layer(i).backward(
                &self.params.tensors[k],
                &enc.cols[i],
                &dact,
                h,
                w,
                &mut gw[0],
                &mut rest[0],
                i > 0,
            );
        }
    }

    /// Full backward pass for a single encode/decode pair.
    pub fn backward(
        &self,
        enc: &EncoderTrace<T>,
        dec: &DecoderTrace<T>,
        masks: Option<&[ChannelDropout<T>]>,
        dlogits: &[T],
        grads: &mut ParamSet<T>,
    ) {
        let dfeat = self.backward_decoder(dec, dlogits, grads);
        self.backward_encoder(enc, masks, dfeat, grads);
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<T>> {
        let input = self.prepare_input(image)?;
        let enc = self.encode(&input);
        Ok(self.decode(&enc, None).logits)
    }

    /// Class probabilities for one image. With `feature_perturb` set, channel
    /// dropout is applied to the encoder features before decoding.
    pub fn forward<R: Rng + ?Sized>(&self, image: &Image, feature_perturb: bool, rng: &mut R) -> Result<ProbabilityMap> {
        let input = self.prepare_input(image)?;
        let enc = self.encode(&input);
        let masks = feature_perturb.then(|| self.sample_feature_masks(rng));
        let dec = self.decode(&enc, masks.as_deref());
        Ok(self.probabilities(&dec.logits))
    }

    /// Deterministic inference without feature perturbation.
    pub fn predict(&self, image: &Image) -> Result<ProbabilityMap> {
        Ok(self.probabilities(&self.logits(image)?))
    }

    pub fn probabilities(&self, logits: &[T]) -> ProbabilityMap {
        ProbabilityMap::from_logits(self.config.num_classes, self.config.input_shape(), logits)
    }
}

fn relu<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}
