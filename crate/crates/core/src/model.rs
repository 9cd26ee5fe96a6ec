//! The full model and its batched forward pass.

use crate::error::{Error, Result};
use crate::losses::{mc_scores_var, nll_per_image, prob_loss_var, LossWeights};
use crate::mog::{
    class_uncertainty, kl_to_standard_var, mixture_moments, reparameterize, stratified_component,
    total_uncertainty, validate_sample_count, SamplingMode,
};
use crate::numcore::nn::Init;
use crate::numcore::{Graph, ParamStore, RngStream, Tensor, Var};
use crate::probdecoder::{DecoderDims, DecoderParams};
use crate::prompts::{diversity_loss_var, TextDims, TextSide};
use crate::synth::{downsample_labels, stack_images, ImageDims, ImageEncoder, Scene, TaskHead};

/// Factor from unit-norm embeddings to the space the Gaussians live in.
///
/// Means are `√d·w`, so each coordinate has unit RMS like the `N(0, I)`
/// prior and the decoder's per-coordinate `σ` is measured on that scale.
/// Sampled embeddings are re-normalized before scoring, so the factor only
/// sets how large `σ` is relative to the mean.
pub fn embedding_scale(d: usize) -> f64 {
    (d as f64).sqrt()
}

/// Architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub k: usize,
    pub l: usize,
    pub d: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub heads: usize,
    pub text_blocks: usize,
    pub image_blocks: usize,
    pub decoder_blocks: usize,
    pub mlp_ratio: usize,
}

impl ModelDims {
    pub fn text(&self) -> TextDims {
        TextDims {
            k: self.k,
            l: self.l,
            d_tok: self.d,
            d: self.d,
            classes: self.classes,
            heads: self.heads,
            blocks: self.text_blocks,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn image(&self) -> ImageDims {
        ImageDims {
            height: self.height,
            width: self.width,
            channels: self.channels,
            patch: self.patch,
            d: self.d,
            heads: self.heads,
            blocks: self.image_blocks,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn decoder(&self) -> DecoderDims {
        DecoderDims {
            d: self.d,
            heads: self.heads,
            blocks: self.decoder_blocks,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PplModel {
    pub text: TextSide,
    pub image: ImageEncoder,
    pub decoder: DecoderParams,
    pub head: TaskHead,
    pub dims: ModelDims,
}

/// Where the reparameterization noise comes from.
pub enum Noise<'r> {
    Draw(&'r mut RngStream),
    /// `ε = 0`: every sample sits on its component (or mixture) mean.
    Zero,
}

/// Knobs of one forward pass.
pub struct ForwardOptions<'r> {
    pub samples: usize,
    pub mode: SamplingMode,
    pub weights: LossWeights,
    pub noise: Noise<'r>,
    /// Replace the decoder's standard deviations with zeros.
    pub zero_sigma: bool,
}

/// Graph handles and summaries produced by [`PplModel::forward`].
pub struct BatchForward {
    pub total: Var,
    pub task: Var,
    pub pixel: Var,
    pub prob: Var,
    pub div: Var,
    pub kl: Var,
    /// Monte-Carlo class probabilities at feature resolution, `[B·P × C]`.
    pub probs: Var,
    /// Mixture variances, `[B·C × d]`.
    pub mixture_var: Var,
    /// Patch-grid labels, `B·P`.
    pub patch_labels: Vec<usize>,
    /// Total uncertainty per image.
    pub uncertainty: Vec<f64>,
}

impl PplModel {
    /// Register every parameter in `store` in a fixed order.
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, dims: ModelDims) -> Result<Self> {
        let mut init = Init { store, rng };
        let text = TextSide::new(&mut init, dims.text())?;
        let image = ImageEncoder::new(&mut init, dims.image())?;
        let decoder = DecoderParams::new(&mut init, dims.decoder())?;
        let head = TaskHead::new(&mut init, dims.d, dims.classes)?;
        Ok(Self {
            text,
            image,
            decoder,
            head,
            dims,
        })
    }

    pub fn patch_labels(&self, scene: &Scene) -> Vec<usize> {
        let d = &self.dims;
        downsample_labels(&scene.labels, d.height, d.width, d.patch, d.classes)
    }

    /// Full objective for a batch of scenes.
    pub fn forward(&self, g: &mut Graph, scenes: &[&Scene], opts: ForwardOptions) -> Result<BatchForward> {
        let ModelDims { k, d, classes: c, .. } = self.dims;
        let b = scenes.len();
        if b == 0 {
            return Err(Error::input("empty batch"));
        }
        let n = opts.samples;
        validate_sample_count(n, k, opts.mode)?;
        let (hp, wp) = self.dims.image().grid();
        let p = hp * wp;

        let w = self.text.encode(g)?;
        let images = g.constant(stack_images(scenes)?);
        let v = self.image.forward(g, images, b)?;

        let slack = self.text.slack(g);
        let div = diversity_loss_var(g, w, slack, k)?;

        // component means and deviations, rows ordered (image, class, attribute)
        let rep: Vec<usize> = (0..b).flat_map(|_| 0..c * k).collect();
        let w_rows = g.gather(w, rep)?;
        let sig = self.decoder.forward(g, w_rows, v, b, (hp, wp))?;
        let mu = g.scale(w_rows, embedding_scale(d));
        let (sigma, log_var) = if opts.zero_sigma {
            let z = g.constant(Tensor::zeros(&[b * c * k, d]));
            let lv = g.log(z);
            (z, lv)
        } else {
            (sig.sigma, sig.logvar)
        };
        let (mix_mean, mix_var) = mixture_moments(g, mu, sigma, k)?;

        // samples ordered (image, sample, class)
        let rows = b * n * c;
        let noise = match opts.noise {
            Noise::Draw(rng) => rng.normal_tensor(&[rows, d], 1.0),
            Noise::Zero => Tensor::zeros(&[rows, d]),
        };
        let z = match opts.mode {
            SamplingMode::Stratified => {
                let idx: Vec<usize> = (0..b)
                    .flat_map(|i| {
                        (0..n).flat_map(move |s| {
                            let a = stratified_component(s, n, k);
                            (0..c).map(move |cls| (i * c + cls) * k + a)
                        })
                    })
                    .collect();
                let m = g.gather(mu, idx.clone())?;
                let s = g.gather(sigma, idx)?;
                reparameterize(g, m, s, noise)?
            }
            SamplingMode::MomentMatched => {
                let idx: Vec<usize> = (0..b)
                    .flat_map(|i| (0..n).flat_map(move |_| (0..c).map(move |cls| i * c + cls)))
                    .collect();
                let m = g.gather(mix_mean, idx.clone())?;
                let var = g.gather(mix_var, idx)?;
                let s = g.sqrt(var);
                reparameterize(g, m, s, noise)?
            }
        };
        let z = g.l2_normalize(z);
        let probs = mc_scores_var(g, v, z, b, n, opts.weights.tau)?;
        let patch_labels: Vec<usize> = scenes.iter().flat_map(|s| self.patch_labels(s)).collect();
        debug_assert_eq!(patch_labels.len(), b * p);
        let nll = nll_per_image(g, probs, &patch_labels, b)?;
        let pixel = g.mean(nll);

        let prob = prob_loss_var(g, nll, mix_var, b)?;

        let kl = kl_to_standard_var(g, mu, sigma, log_var)?;
        let task = self.head.loss(g, v, &patch_labels)?;

        let a = g.add(task, prob)?;
        let wd = g.scale(div, opts.weights.alpha);
        let a = g.add(a, wd)?;
        let wk = g.scale(kl, opts.weights.beta);
        let total = g.add(a, wk)?;

        let var_t = g.value(mix_var);
        let uncertainty = (0..b)
            .map(|i| {
                let per_class: Vec<f64> = (0..c)
                    .map(|cls| {
                        let sd: Vec<f64> = var_t.row(i * c + cls).iter().map(|x| x.sqrt()).collect();
                        class_uncertainty(&sd)
                    })
                    .collect();
                total_uncertainty(&per_class)
            })
            .collect();

        Ok(BatchForward {
            total,
            task,
            pixel,
            prob,
            div,
            kl,
            probs,
            mixture_var: mix_var,
            patch_labels,
            uncertainty,
        })
    }
}
