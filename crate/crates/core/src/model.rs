//! The three-component network: an MLP encoder, a linear projection head
//! producing l2-normalized embeddings, and a linear classifier over all
//! classes that reads encoder features directly (the projector is bypassed
//! on the classification path).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    affine_backward, affine_forward, affine_relu_forward, l2_normalize, l2_normalize_backward,
    AffineCache, Tensor2,
};

/// Architecture description. The classifier is sized for all classes of the
/// whole stream up front; logits of classes not yet seen simply stay
/// untrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.embedding_dim == 0
            || self.num_classes == 0
            || self.hidden_dims.is_empty()
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

impl Affine {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { w: Tensor2::zeros(rows, cols), b: vec![0.0; cols] }
    }

    fn he_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("he init");
        let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { w: Tensor2::from_vec(rows, cols, data).expect("sized data"), b: vec![0.0; cols] }
    }

    fn len(&self) -> usize {
        self.w.as_slice().len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub encoder: Vec<Affine>,
    pub projector: Affine,
    pub classifier: Affine,
}

/// Gradients shaped like `ModelParams`.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Vec<Affine>,
    pub projector: Affine,
    pub classifier: Affine,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardPass {
    encoder_caches: Vec<AffineCache>,
    features: Tensor2,
    projector_cache: AffineCache,
    pre_norm: Tensor2,
    pub embeddings: Tensor2,
    classifier_cache: Option<AffineCache>,
    pub logits: Option<Tensor2>,
}

impl ModelParams {
    /// He-initialized weights, zero biases; deterministic under `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(spec.hidden_dims.len());
        let mut prev = spec.input_dim;
        for &h in &spec.hidden_dims {
            encoder.push(Affine::he_init(prev, h, &mut rng));
            prev = h;
        }
        let projector = Affine::he_init(prev, spec.embedding_dim, &mut rng);
        let classifier = Affine::he_init(prev, spec.num_classes, &mut rng);
        Ok(Self { spec, encoder, projector, classifier })
    }

    pub fn num_params(&self) -> usize {
        self.encoder.iter().map(Affine::len).sum::<usize>()
            + self.projector.len()
            + self.classifier.len()
    }

    /// Flattening order: encoder layers in depth order (weights row-major,
    /// then bias), projector, classifier.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.encoder.iter().chain([&self.projector, &self.classifier]) {
            out.extend_from_slice(layer.w.as_slice());
            out.extend_from_slice(&layer.b);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten); shapes come from `self`.
    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in self.encoder.iter_mut().chain([&mut self.projector, &mut self.classifier]) {
            let wlen = layer.w.as_slice().len();
            layer.w.as_mut_slice().copy_from_slice(&flat[offset..offset + wlen]);
            offset += wlen;
            let blen = layer.b.len();
            layer.b.copy_from_slice(&flat[offset..offset + blen]);
            offset += blen;
        }
        Ok(())
    }

    /// Runs encoder, projector (with row normalization), and optionally the
    /// classifier head, keeping caches for the backward pass.
    pub fn forward(&self, x: &Tensor2, want_logits: bool) -> Result<ForwardPass> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input dim {} does not match encoder dim {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        let mut h = x.clone();
        let mut encoder_caches = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (out, cache) = affine_relu_forward(&h, &layer.w, &layer.b)?;
            encoder_caches.push(cache);
            h = out;
        }
        let (pre_norm, projector_cache) =
            affine_forward(&h, &self.projector.w, &self.projector.b)?;
        let mut embeddings = Tensor2::zeros(pre_norm.rows(), pre_norm.cols());
        for i in 0..pre_norm.rows() {
            let unit = l2_normalize(pre_norm.row(i))?;
            embeddings.row_mut(i).copy_from_slice(&unit);
        }
        let (classifier_cache, logits) = if want_logits {
            let (l, c) = affine_forward(&h, &self.classifier.w, &self.classifier.b)?;
            (Some(c), Some(l))
        } else {
            (None, None)
        };
        Ok(ForwardPass {
            encoder_caches,
            features: h,
            projector_cache,
            pre_norm,
            embeddings,
            classifier_cache,
            logits,
        })
    }

    /// Batch of l2-normalized embeddings `g(f(x))`.
    pub fn embed(&self, x: &Tensor2) -> Result<Tensor2> {
        Ok(self.forward(x, false)?.embeddings)
    }

    /// Logits over all classes, `phi(f(x))`; the projector plays no part.
    pub fn classify(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input dim {} does not match encoder dim {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        let mut h = x.clone();
        for layer in &self.encoder {
            let (out, _) = affine_relu_forward(&h, &layer.w, &layer.b)?;
            h = out;
        }
        let (logits, _) = affine_forward(&h, &self.classifier.w, &self.classifier.b)?;
        Ok(logits)
    }

    /// Accumulates parameter gradients for one forward pass given loss
    /// gradients w.r.t. the normalized embeddings and/or the logits.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_embeddings: Option<&Tensor2>,
        d_logits: Option<&Tensor2>,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let mut d_features = Tensor2::zeros(pass.features.rows(), pass.features.cols());

        if let Some(dz) = d_embeddings {
            if dz.rows() != pass.embeddings.rows() || dz.cols() != pass.embeddings.cols() {
                return Err(Error::Shape("embedding gradient shape mismatch".into()));
            }
            let mut d_pre_norm = Tensor2::zeros(dz.rows(), dz.cols());
            for i in 0..dz.rows() {
                let back = l2_normalize_backward(pass.pre_norm.row(i), dz.row(i))?;
                d_pre_norm.row_mut(i).copy_from_slice(&back);
            }
            let (d_h, d_w, d_b) =
                affine_backward(&pass.projector_cache, &self.projector.w, &d_pre_norm)?;
            grads.projector.w.add_assign(&d_w)?;
            for (g, d) in grads.projector.b.iter_mut().zip(&d_b) {
                *g += d;
            }
            d_features.add_assign(&d_h)?;
        }

        if let Some(dl) = d_logits {
            let cache = pass
                .classifier_cache
                .as_ref()
                .ok_or_else(|| Error::Shape("no classifier cache in forward pass".into()))?;
            let (d_h, d_w, d_b) = affine_backward(cache, &self.classifier.w, dl)?;
            grads.classifier.w.add_assign(&d_w)?;
            for (g, d) in grads.classifier.b.iter_mut().zip(&d_b) {
                *g += d;
            }
            d_features.add_assign(&d_h)?;
        }

        let mut d_out = d_features;
        for idx in (0..self.encoder.len()).rev() {
            let (d_in, d_w, d_b) =
                affine_backward(&pass.encoder_caches[idx], &self.encoder[idx].w, &d_out)?;
            grads.encoder[idx].w.add_assign(&d_w)?;
            for (g, d) in grads.encoder[idx].b.iter_mut().zip(&d_b) {
                *g += d;
            }
            d_out = d_in;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: self
                .encoder
                .iter()
                .map(|l| Affine::zeros(l.w.rows(), l.w.cols()))
                .collect(),
            projector: Affine::zeros(self.projector.w.rows(), self.projector.w.cols()),
            classifier: Affine::zeros(self.classifier.w.rows(), self.classifier.w.cols()),
        }
    }
}

impl ModelGrads {
    /// Same ordering as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.encoder.iter().chain([&self.projector, &self.classifier]) {
            out.extend_from_slice(layer.w.as_slice());
            out.extend_from_slice(&layer.b);
        }
        out
    }
}

/// Versioned checkpoint wrapper; round-trips parameters bit-exactly.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    params: ModelParams,
}

pub fn save_checkpoint(params: &ModelParams) -> String {
    serde_json::to_string(&Checkpoint { format_version: 1, params: params.clone() })
        .expect("checkpoint serialization")
}

pub fn load_checkpoint(text: &str) -> Result<ModelParams> {
    let ck: Checkpoint =
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
    if ck.format_version != 1 {
        return Err(Error::Schema(format!(
            "unsupported checkpoint version {}",
            ck.format_version
        )));
    }
    ck.params.spec.validate()?;
    Ok(ck.params)
}
