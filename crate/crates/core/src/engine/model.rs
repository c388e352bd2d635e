//! Toy dual-stream diffusion transformer.
//!
//! Both streams run through the same weights. Within every block the image
//! stream's self-attention is evaluated first; its rotated keys and values
//! are then appended to the video stream's keys and values, readable only by
//! video target queries. Guidance tokens enter through cross-attention.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DiTConfig;
use crate::attention::{build_semi_mask_scoped, AttentionMask, StreamKV};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::guidance::AdapterMap;
use crate::latent::{build_layout_with, GridDims, Role, SegmentLayout, Stream};
use crate::rope::{assign_coordinates, RotaryTables};
use crate::tensor::Mat;

/// Per-block parameters, generic so the same shape can hold weights,
/// gradients or graph variables.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub cross_q: T,
    pub cross_k: T,
    pub cross_v: T,
    pub cross_o: T,
    pub mlp_in: T,
    pub mlp_in_bias: T,
    pub mlp_out: T,
    pub mlp_out_bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiTParams<T> {
    pub input: T,
    pub input_bias: T,
    pub time: T,
    pub time_bias: T,
    pub blocks: Vec<BlockParams<T>>,
    pub output: T,
    pub output_bias: T,
}

pub type DiTWeights = DiTParams<Mat>;

impl<T> BlockParams<T> {
    fn fields(&self) -> [(&'static str, &T); 12] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("cross_q", &self.cross_q),
            ("cross_k", &self.cross_k),
            ("cross_v", &self.cross_v),
            ("cross_o", &self.cross_o),
            ("mlp_in", &self.mlp_in),
            ("mlp_in_bias", &self.mlp_in_bias),
            ("mlp_out", &self.mlp_out),
            ("mlp_out_bias", &self.mlp_out_bias),
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            cross_q: f(&self.cross_q),
            cross_k: f(&self.cross_k),
            cross_v: f(&self.cross_v),
            cross_o: f(&self.cross_o),
            mlp_in: f(&self.mlp_in),
            mlp_in_bias: f(&self.mlp_in_bias),
            mlp_out: f(&self.mlp_out),
            mlp_out_bias: f(&self.mlp_out_bias),
        }
    }
}

impl<T> DiTParams<T> {
    /// Every tensor with a dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("input".to_string(), &self.input),
            ("input_bias".to_string(), &self.input_bias),
            ("time".to_string(), &self.time),
            ("time_bias".to_string(), &self.time_bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("output".to_string(), &self.output));
        out.push(("output_bias".to_string(), &self.output_bias));
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DiTParams<U> {
        DiTParams {
            input: f(&self.input),
            input_bias: f(&self.input_bias),
            time: f(&self.time),
            time_bias: f(&self.time_bias),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            output: f(&self.output),
            output_bias: f(&self.output_bias),
        }
    }
}

impl DiTWeights {
    pub fn init(cfg: &DiTConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = cfg.model_dim;
        let hidden = m * cfg.mlp_ratio;
        let mut dense =
            |fan_in: usize, fan_out: usize| Mat::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), &mut rng);
        let input = dense(cfg.latent_channels, m);
        let time = dense(m, m);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                wq: dense(m, m),
                wk: dense(m, m),
                wv: dense(m, m),
                wo: dense(m, m).scale(0.5),
                cross_q: dense(m, m),
                cross_k: dense(cfg.guidance_dim, m),
                cross_v: dense(cfg.guidance_dim, m),
                cross_o: dense(m, m).scale(0.5),
                mlp_in: dense(m, hidden),
                mlp_in_bias: Mat::zeros(1, hidden),
                mlp_out: dense(hidden, m).scale(0.5),
                mlp_out_bias: Mat::zeros(1, m),
            })
            .collect();
        let output = dense(m, cfg.latent_channels);
        DiTParams {
            input,
            input_bias: Mat::zeros(1, m),
            time,
            time_bias: Mat::zeros(1, m),
            blocks,
            output,
            output_bias: Mat::zeros(1, cfg.latent_channels),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Elementwise sum of two equally shaped parameter sets.
    pub fn sum(&self, other: &DiTWeights) -> DiTWeights {
        let others: Vec<&Mat> = other.named().into_iter().map(|(_, m)| m).collect();
        let mut i = 0;
        self.map(|m| {
            let out = m.add(others[i]).expect("parameter shapes match");
            i += 1;
            out
        })
    }

    /// Copy with `delta` added to entry `k` of the `tensor`-th parameter, in
    /// [`DiTParams::named`] order.
    pub fn perturbed(&self, tensor: usize, k: usize, delta: f64) -> DiTWeights {
        let mut i = 0;
        self.map(|m| {
            let mut m = m.clone();
            if i == tensor {
                m.data_mut()[k] += delta;
            }
            i += 1;
            m
        })
    }

    /// `self - lr * grads`.
    pub fn sgd_step(&self, grads: &DiTWeights, lr: f64) -> DiTWeights {
        let gs: Vec<&Mat> = grads.named().into_iter().map(|(_, m)| m).collect();
        let mut i = 0;
        self.map(|m| {
            let out = m.zip_map(gs[i], |w, g| w - lr * g).expect("parameter shapes match");
            i += 1;
            out
        })
    }
}

/// Generator weights plus the VLM adapter.
#[derive(Debug, Clone)]
pub struct DualStreamModel {
    pub config: DiTConfig,
    pub weights: DiTWeights,
    pub adapter: AdapterMap,
}

impl DualStreamModel {
    pub fn new(config: DiTConfig) -> Result<Self> {
        config.validate()?;
        let weights = DiTWeights::init(&config);
        let adapter = AdapterMap::seeded(config.vlm_dim, config.guidance_dim, config.seed ^ 0xada9_7e55);
        Ok(DualStreamModel {
            config,
            weights,
            adapter,
        })
    }
}

/// Layouts of the two streams for a target video of `video` extent and a
/// raw reference of `reference` extent. The harmonized image shares the
/// video's spatial grid.
pub fn stream_layouts(cfg: &DiTConfig, video: GridDims, reference: GridDims) -> Result<(SegmentLayout, SegmentLayout)> {
    let scheme = cfg.ablations.rope_scheme();
    let image = GridDims::new(1, video.height, video.width);
    let video_layout = build_layout_with(
        Stream::VideoStream,
        &[
            (Role::TargetVideoLatent, video),
            (Role::SourceVideo, video),
            (Role::TargetRefImage, image),
        ],
        scheme,
    )?;
    let image_layout = build_layout_with(
        Stream::ImageStream,
        &[
            (Role::TargetImageLatent, image),
            (Role::SourceFirstFrame, image),
            (Role::RawRefImage, reference),
        ],
        scheme,
    )?;
    Ok((video_layout, image_layout))
}

/// Tokens and guidance for one stream in a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StreamInput<'a> {
    pub layout: &'a SegmentLayout,
    /// `layout.total_tokens()` rows of latent channels, in layout order.
    pub tokens: &'a Mat,
    pub guidance: &'a Mat,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Velocity for the video target segment.
    pub video_velocity: Mat,
    /// Velocity for the image target segment.
    pub image_velocity: Mat,
    /// Image-stream keys and values retained at each layer.
    pub image_kv: Vec<StreamKV>,
}

/// Graph nodes produced by [`forward_graph`].
pub(crate) struct GraphOutput {
    pub video_velocity: Var,
    pub image_velocity: Option<Var>,
    pub image_kv: Vec<(Var, Var)>,
}

/// Guidance for a stream already living on the graph.
pub(crate) struct GraphStream<'a> {
    pub layout: &'a SegmentLayout,
    pub tokens: &'a Mat,
    pub guidance: Var,
}

fn timestep_features(sigma: f64, dim: usize) -> Mat {
    let half = dim / 2;
    let t = sigma * 1000.0;
    let mut out = Mat::zeros(1, dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.set(0, i, (t * freq).sin());
        out.set(0, half + i, (t * freq).cos());
    }
    out
}

struct StreamState {
    hidden: Var,
    tables: Rc<RotaryTables>,
}

fn check_stream(cfg: &DiTConfig, name: &str, layout: &SegmentLayout, tokens: &Mat, guidance_cols: usize) -> Result<()> {
    if tokens.shape() != (layout.total_tokens(), cfg.latent_channels) {
        return Err(Error::Shape(format!(
            "{name} tokens {:?}, layout expects {}x{}",
            tokens.shape(),
            layout.total_tokens(),
            cfg.latent_channels
        )));
    }
    if guidance_cols != cfg.guidance_dim {
        return Err(Error::Shape(format!(
            "{name} guidance is {guidance_cols}-dim, model expects {}",
            cfg.guidance_dim
        )));
    }
    Ok(())
}

/// Multi-head attention on graph nodes. `q` has one row per query; `k`, `v`
/// one row per key; all are `heads * head_dim` wide.
fn graph_attention(g: &mut Graph, cfg: &DiTConfig, q: Var, k: Var, v: Var, mask: &Rc<AttentionMask>) -> Var {
    let hd = cfg.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let p = g.masked_softmax(scores, mask);
        heads.push(g.matmul(p, vh));
    }
    if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    }
}

fn cross_attention(g: &mut Graph, cfg: &DiTConfig, b: &BlockParams<Var>, hidden: Var, guidance: Var) -> Var {
    let a = g.rms_norm(hidden);
    let q = g.matmul(a, b.cross_q);
    let k = g.matmul(guidance, b.cross_k);
    let v = g.matmul(guidance, b.cross_v);
    let mask = Rc::new(AttentionMask::full(g.value(q).rows(), g.value(k).rows()));
    let attn = graph_attention(g, cfg, q, k, v, &mask);
    let o = g.matmul(attn, b.cross_o);
    g.add(hidden, o)
}

fn mlp(g: &mut Graph, b: &BlockParams<Var>, hidden: Var) -> Var {
    let a = g.rms_norm(hidden);
    let m = g.matmul(a, b.mlp_in);
    let m = g.add_bias(m, b.mlp_in_bias);
    let m = g.silu(m);
    let m = g.matmul(m, b.mlp_out);
    let m = g.add_bias(m, b.mlp_out_bias);
    g.add(hidden, m)
}

fn embed(g: &mut Graph, p: &DiTParams<Var>, tokens: &Mat, time: Var) -> Var {
    let x = g.leaf(tokens.clone());
    let h = g.matmul(x, p.input);
    let h = g.add_bias(h, p.input_bias);
    g.add_bias(h, time)
}

fn project_out(g: &mut Graph, p: &DiTParams<Var>, hidden: Var, layout: &SegmentLayout) -> Var {
    let span = layout.target().span.clone();
    let a = g.rms_norm(hidden);
    let t = g.slice_rows(a, span.start, span.end);
    let o = g.matmul(t, p.output);
    g.add_bias(o, p.output_bias)
}

/// Record the full dual-stream forward pass on `g`.
pub(crate) fn forward_graph(
    g: &mut Graph,
    cfg: &DiTConfig,
    params: &DiTParams<Var>,
    video: GraphStream<'_>,
    image: Option<GraphStream<'_>>,
    sigma: f64,
) -> Result<GraphOutput> {
    let rope = cfg.rope()?;
    let tf = g.leaf(timestep_features(sigma, cfg.model_dim));
    let time = g.matmul(tf, params.time);
    let time = g.add_bias(time, params.time_bias);
    let time = g.silu(time);

    let mut vstate = StreamState {
        hidden: embed(g, params, video.tokens, time),
        tables: Rc::new(RotaryTables::new(&assign_coordinates(video.layout), &rope)),
    };
    let mut istate = image.as_ref().map(|s| StreamState {
        hidden: embed(g, params, s.tokens, time),
        tables: Rc::new(RotaryTables::new(&assign_coordinates(s.layout), &rope)),
    });
    let inject = image.is_some() && !cfg.ablations.single_stream;
    let image_mask = image
        .as_ref()
        .map(|s| Rc::new(build_semi_mask_scoped(s.layout, 0, cfg.condition_scope)));
    let injected = if inject {
        image.as_ref().map_or(0, |s| s.layout.total_tokens())
    } else {
        0
    };
    let video_mask = Rc::new(build_semi_mask_scoped(video.layout, injected, cfg.condition_scope));

    let mut image_kv = Vec::with_capacity(cfg.depth);
    for b in &params.blocks {
        // image stream first
        let mut retained = None;
        if let (Some(st), Some(s), Some(mask)) = (istate.as_mut(), image.as_ref(), image_mask.as_ref()) {
            let a = g.rms_norm(st.hidden);
            let q = g.matmul(a, b.wq);
            let q = g.rotate(q, st.tables.clone());
            let k = g.matmul(a, b.wk);
            let k = g.rotate(k, st.tables.clone());
            let v = g.matmul(a, b.wv);
            let attn = graph_attention(g, cfg, q, k, v, mask);
            let o = g.matmul(attn, b.wo);
            st.hidden = g.add(st.hidden, o);
            st.hidden = cross_attention(g, cfg, b, st.hidden, s.guidance);
            st.hidden = mlp(g, b, st.hidden);
            image_kv.push((k, v));
            retained = Some((k, v));
        }

        let a = g.rms_norm(vstate.hidden);
        let q = g.matmul(a, b.wq);
        let q = g.rotate(q, vstate.tables.clone());
        let k = g.matmul(a, b.wk);
        let k = g.rotate(k, vstate.tables.clone());
        let v = g.matmul(a, b.wv);
        let (k, v) = match retained.filter(|_| inject) {
            Some((ik, iv)) => (g.concat_rows(&[k, ik]), g.concat_rows(&[v, iv])),
            None => (k, v),
        };
        let attn = graph_attention(g, cfg, q, k, v, &video_mask);
        let o = g.matmul(attn, b.wo);
        vstate.hidden = g.add(vstate.hidden, o);
        vstate.hidden = cross_attention(g, cfg, b, vstate.hidden, video.guidance);
        vstate.hidden = mlp(g, b, vstate.hidden);
    }

    let video_velocity = project_out(g, params, vstate.hidden, video.layout);
    let image_velocity = match (istate, image.as_ref()) {
        (Some(st), Some(s)) => Some(project_out(g, params, st.hidden, s.layout)),
        _ => None,
    };
    Ok(GraphOutput {
        video_velocity,
        image_velocity,
        image_kv,
    })
}

pub(crate) fn weights_on_graph(g: &mut Graph, w: &DiTWeights) -> DiTParams<Var> {
    w.map(|m| g.leaf(m.clone()))
}

impl DualStreamModel {
    /// One evaluation of both streams. Returns target-segment velocities and
    /// the per-layer image keys/values that were offered to the video stream.
    pub fn dit_forward(&self, video: StreamInput<'_>, image: StreamInput<'_>, sigma: f64) -> Result<ForwardOutput> {
        let cfg = &self.config;
        check_stream(cfg, "video", video.layout, video.tokens, video.guidance.cols())?;
        check_stream(cfg, "image", image.layout, image.tokens, image.guidance.cols())?;
        if video.layout.stream() != Stream::VideoStream || image.layout.stream() != Stream::ImageStream {
            return Err(Error::Layout("stream inputs passed in the wrong order".into()));
        }
        let mut g = Graph::new();
        let params = weights_on_graph(&mut g, &self.weights);
        let vg = g.leaf(video.guidance.clone());
        let ig = g.leaf(image.guidance.clone());
        let out = forward_graph(
            &mut g,
            cfg,
            &params,
            GraphStream {
                layout: video.layout,
                tokens: video.tokens,
                guidance: vg,
            },
            Some(GraphStream {
                layout: image.layout,
                tokens: image.tokens,
                guidance: ig,
            }),
            sigma,
        )?;
        let image_kv = out
            .image_kv
            .iter()
            .map(|&(k, v)| StreamKV::new(g.value(k).clone(), g.value(v).clone(), image.layout.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            video_velocity: g.value(out.video_velocity).clone(),
            image_velocity: g.value(out.image_velocity.expect("image stream present")).clone(),
            image_kv,
        })
    }
}
