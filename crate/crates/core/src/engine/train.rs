//! Dual-task rectified-flow objective and its gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{forward_graph, stream_layouts, weights_on_graph, DiTWeights, DualStreamModel, GraphStream};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::guidance::AdapterMap;
use crate::latent::{build_layout, patchify, GridDims, LatentGrid, Role, Stream};
use crate::tensor::{pairwise_sum, Mat};

/// Mean squared error between a predicted velocity and `eps - x0`.
pub fn rectified_flow_loss(v_pred: &Mat, x0: &Mat, eps: &Mat) -> Result<f64> {
    let target = eps.sub(x0)?;
    let diff = v_pred.sub(&target)?;
    let n = diff.data().len().max(1) as f64;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / n)
}

/// `(1 - sigma) x0 + sigma eps`.
pub fn noisy_latent(x0: &Mat, eps: &Mat, sigma: f64) -> Result<Mat> {
    x0.zip_map(eps, |a, b| (1.0 - sigma) * a + sigma * b)
}

/// One training example: a quadruplet's latents, its guidance, and the noise
/// draw used for this step.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub source_video: LatentGrid,
    pub target_video: LatentGrid,
    pub raw_ref: LatentGrid,
    pub harmonized_ref: LatentGrid,
    pub video_guidance: Mat,
    pub image_guidance: Mat,
    pub sigma: f64,
    pub video_noise: Mat,
    pub image_noise: Mat,
}

impl TrainItem {
    /// Draw sigma in (0, 1) and Gaussian noise for both targets from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_seeded_noise(
        source_video: LatentGrid,
        target_video: LatentGrid,
        raw_ref: LatentGrid,
        harmonized_ref: LatentGrid,
        video_guidance: Mat,
        image_guidance: Mat,
        seed: u64,
    ) -> Result<Self> {
        if source_video.dims() != target_video.dims() {
            return Err(Error::InvalidGrid("source and target videos differ in extent".into()));
        }
        let vd = target_video.dims();
        if harmonized_ref.dims() != GridDims::new(1, vd.height, vd.width) {
            return Err(Error::InvalidGrid(
                "harmonized reference must match the video's spatial grid".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = rng.random_range(0.02..0.98);
        let c = target_video.channels();
        let video_noise = Mat::randn(vd.tokens(), c, 1.0, &mut rng);
        let image_noise = Mat::randn(harmonized_ref.dims().tokens(), c, 1.0, &mut rng);
        Ok(TrainItem {
            source_video,
            target_video,
            raw_ref,
            harmonized_ref,
            video_guidance,
            image_guidance,
            sigma,
            video_noise,
            image_noise,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Batch mean of `video_term + image_term` (image term omitted under
    /// `single_stream`).
    pub loss: f64,
    pub video_term: f64,
    pub image_term: f64,
    pub gradients: DiTWeights,
}

struct ItemResult {
    loss: f64,
    video_term: f64,
    image_term: f64,
    grads: Option<DiTWeights>,
}

fn item_loss(model: &DualStreamModel, weights: &DiTWeights, item: &TrainItem, with_grads: bool) -> Result<ItemResult> {
    let cfg = &model.config;
    let (vlayout, ilayout) = stream_layouts(cfg, item.target_video.dims(), item.raw_ref.dims())?;
    let (v0, _) = patchify(&item.target_video);
    let (i0, _) = patchify(&item.harmonized_ref);
    let (src, _) = patchify(&item.source_video);
    let frame0 = item.source_video.frame(0, Role::SourceFirstFrame)?;
    let (f0, _) = patchify(&frame0);
    let (rr, _) = patchify(&item.raw_ref);
    let v_t = noisy_latent(&v0, &item.video_noise, item.sigma)?;
    let i_t = noisy_latent(&i0, &item.image_noise, item.sigma)?;
    let vt = Mat::concat_rows(&[&v_t, &src, &i_t])?;
    let it = Mat::concat_rows(&[&i_t, &f0, &rr])?;

    // Under `single_stream` the objective loses its image task only; the
    // forward pass, injection included, is left as is.
    let mut forward_cfg = cfg.clone();
    forward_cfg.ablations.single_stream = false;
    let mut g = Graph::new();
    let params = weights_on_graph(&mut g, weights);
    let vg = g.leaf(item.video_guidance.clone());
    let ig = g.leaf(item.image_guidance.clone());
    let out = forward_graph(
        &mut g,
        &forward_cfg,
        &params,
        GraphStream {
            layout: &vlayout,
            tokens: &vt,
            guidance: vg,
        },
        Some(GraphStream {
            layout: &ilayout,
            tokens: &it,
            guidance: ig,
        }),
        item.sigma,
    )?;
    let video_target = Rc::new(item.video_noise.sub(&v0)?);
    let image_target = Rc::new(item.image_noise.sub(&i0)?);
    let video_term = g.mse(out.video_velocity, video_target);
    let image_term = g.mse(out.image_velocity.expect("image stream present"), image_target);
    let loss = if cfg.ablations.single_stream {
        video_term
    } else {
        g.add(video_term, image_term)
    };
    let lv = g.value(loss).get(0, 0);
    if !lv.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let grads = with_grads.then(|| collect_grads(&g, loss, &params, weights));
    Ok(ItemResult {
        loss: lv,
        video_term: g.value(video_term).get(0, 0),
        image_term: g.value(image_term).get(0, 0),
        grads,
    })
}

fn collect_grads(g: &Graph, loss: Var, params: &super::model::DiTParams<Var>, weights: &DiTWeights) -> DiTWeights {
    let grads = g.backward(loss);
    let shapes: Vec<(usize, usize)> = weights.named().iter().map(|(_, m)| m.shape()).collect();
    let mut i = 0;
    params.map(|&v| {
        let (r, c) = shapes[i];
        i += 1;
        grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(r, c))
    })
}

/// Pairwise reduction of per-item gradients in index order.
fn reduce_grads(items: &[DiTWeights]) -> DiTWeights {
    match items {
        [one] => one.clone(),
        _ => {
            let mid = items.len() / 2;
            reduce_grads(&items[..mid]).sum(&reduce_grads(&items[mid..]))
        }
    }
}

fn evaluate(
    model: &DualStreamModel,
    weights: &DiTWeights,
    batch: &[TrainItem],
    with_grads: bool,
) -> Result<Vec<ItemResult>> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    batch
        .par_iter()
        .map(|item| item_loss(model, weights, item, with_grads))
        .collect()
}

/// Batch loss and gradients with respect to every generator weight. The
/// adapter is frozen here.
pub fn train_step(model: &DualStreamModel, batch: &[TrainItem]) -> Result<TrainOutput> {
    let results = evaluate(model, &model.weights, batch, true)?;
    let n = results.len() as f64;
    let mean = |f: fn(&ItemResult) -> f64| pairwise_sum(&results.iter().map(f).collect::<Vec<_>>()) / n;
    let per_item: Vec<DiTWeights> = results
        .iter()
        .map(|r| r.grads.clone().expect("gradients requested"))
        .collect();
    let gradients = reduce_grads(&per_item).map(|m| m.scale(1.0 / n));
    Ok(TrainOutput {
        loss: mean(|r| r.loss),
        video_term: mean(|r| r.video_term),
        image_term: mean(|r| r.image_term),
        gradients,
    })
}

/// Batch loss only, evaluated at `weights` (used for finite differences).
pub fn batch_loss(model: &DualStreamModel, weights: &DiTWeights, batch: &[TrainItem]) -> Result<f64> {
    let results = evaluate(model, weights, batch, false)?;
    Ok(pairwise_sum(&results.iter().map(|r| r.loss).collect::<Vec<_>>()) / results.len() as f64)
}

/// Text-to-video example for adapter pretraining: the VLM's frame
/// description tokens guide generation of the whole video.
#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub video: LatentGrid,
    /// Raw (pre-adapter) VLM tokens after prompt-token removal.
    pub vlm_tokens: Mat,
    pub motion_tokens: Mat,
    pub sigma: f64,
    pub noise: Mat,
}

#[derive(Debug, Clone)]
pub struct AdapterGradients {
    pub loss: f64,
    pub weight: Mat,
    pub bias: Mat,
}

/// Loss and adapter gradients with the generator frozen. Guidance is
/// `[adapter(vlm_tokens) ; motion_tokens]` on a video-only layout.
pub fn adapter_pretrain_step(
    model: &DualStreamModel,
    adapter: &AdapterMap,
    item: &PretrainItem,
) -> Result<AdapterGradients> {
    let cfg = &model.config;
    let layout = build_layout(Stream::VideoStream, &[(Role::TargetVideoLatent, item.video.dims())])?;
    let (x0, _) = patchify(&item.video);
    let x_t = noisy_latent(&x0, &item.noise, item.sigma)?;
    if item.vlm_tokens.cols() != adapter.in_dim() || item.motion_tokens.cols() != adapter.out_dim() {
        return Err(Error::Shape("pretraining tokens do not match the adapter".into()));
    }

    let mut g = Graph::new();
    let params = weights_on_graph(&mut g, &model.weights);
    let w = g.leaf(adapter.weight.clone());
    let b = g.leaf(adapter.bias.clone());
    let raw = g.leaf(item.vlm_tokens.clone());
    let adapted = g.matmul(raw, w);
    let adapted = g.add_bias(adapted, b);
    let motion = g.leaf(item.motion_tokens.clone());
    let guidance = g.concat_rows(&[adapted, motion]);
    let out = forward_graph(
        &mut g,
        cfg,
        &params,
        GraphStream {
            layout: &layout,
            tokens: &x_t,
            guidance,
        },
        None,
        item.sigma,
    )?;
    let target = Rc::new(item.noise.sub(&x0)?);
    let loss = g.mse(out.video_velocity, target);
    let lv = g.value(loss).get(0, 0);
    if !lv.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let grads = g.backward(loss);
    Ok(AdapterGradients {
        loss: lv,
        weight: grads
            .get(w)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(adapter.in_dim(), adapter.out_dim())),
        bias: grads
            .get(b)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(1, adapter.out_dim())),
    })
}
