//! Rectified-flow Euler sampling with closed-loop guidance refresh.
//!
//! Convention: `x_t = (1 - sigma) x0 + sigma * eps`, velocity `v = eps - x0`.
//! Step `k` (counting down from `steps - 1`) sits at `sigma_k = (k + 1) / steps`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::FeedbackConfig;
use super::model::{stream_layouts, DualStreamModel, StreamInput};
use crate::error::{Error, Result};
use crate::guidance::{
    compose_video_guidance, feedback_guidance, insert_guidance, motion_guidance, style_guidance, FeedbackPrompt,
    GuidanceEmbedding, MotionEncoder, VlmClient,
};
use crate::latent::{patchify, unpatchify, GridDims, LatentGrid, Role};
use crate::tensor::Mat;

/// Noise level of step `t_index` under the linear schedule. `t_index = -1`
/// is the clean endpoint.
pub fn sigma_at(t_index: isize, steps: usize) -> f64 {
    (t_index + 1) as f64 / steps as f64
}

/// Closed-form clean estimate `x_t - sigma * v`.
pub fn one_step_x0(x_t: &Mat, v_pred: &Mat, sigma: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Shape(format!("sigma {sigma} outside [0, 1]")));
    }
    x_t.zip_map(v_pred, |x, v| x - sigma * v)
}

/// True iff feedback is enabled and the step is at or above `t_start`.
pub fn feedback_gate(t_index: usize, cfg: &FeedbackConfig) -> bool {
    cfg.enabled && t_index >= cfg.t_start
}

/// Plain Euler integration from `x_start` at sigma = 1 down to sigma = 0.
pub fn euler_sample<F>(x_start: &Mat, steps: usize, mut velocity: F) -> Result<Mat>
where
    F: FnMut(&Mat, f64, usize) -> Result<Mat>,
{
    if steps == 0 {
        return Err(Error::Config("at least one sampling step is required".into()));
    }
    let mut x = x_start.clone();
    for t in (0..steps).rev() {
        let sigma = sigma_at(t as isize, steps);
        let dsigma = sigma - sigma_at(t as isize - 1, steps);
        let v = velocity(&x, sigma, t)?;
        x = x.zip_map(&v, |a, b| a - dsigma * b)?;
    }
    Ok(x)
}

/// Progress of a sampling run at one step.
#[derive(Debug, Clone)]
pub struct DenoiseState {
    pub t_index: usize,
    pub steps: usize,
    pub sigma: f64,
    pub video_latent: Mat,
    pub image_latent: Mat,
    pub video_guidance: GuidanceEmbedding,
    pub image_guidance: GuidanceEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t_index: usize,
    pub sigma: f64,
    pub gate: bool,
    /// Guidance-client invocations made during this step.
    pub calls: usize,
    pub video_norm: f64,
    pub image_norm: f64,
}

fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} sigma={} gate={} calls={} video_norm={} image_norm={}",
            self.t_index,
            sig9(self.sigma),
            u8::from(self.gate),
            self.calls,
            sig9(self.video_norm),
            sig9(self.image_norm)
        )
    }
}

impl StepRecord {
    pub fn parse_line(line: &str) -> Result<StepRecord> {
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("trace field `{part}` lacks '='")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("trace line lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Config(format!("bad `{k}`"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Config(format!("bad `{k}`"))) };
        Ok(StepRecord {
            t_index: int("step")?,
            sigma: num("sigma")?,
            gate: match get("gate")? {
                "1" => true,
                "0" => false,
                other => return Err(Error::Config(format!("bad gate `{other}`"))),
            },
            calls: int("calls")?,
            video_norm: num("video_norm")?,
            image_norm: num("image_norm")?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// Client calls made to build the initial guidance.
    pub initial_calls: usize,
    pub steps: Vec<StepRecord>,
}

impl Trace {
    pub fn gated_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.gate).count()
    }

    pub fn feedback_calls(&self) -> usize {
        self.steps.iter().map(|s| s.calls).sum()
    }

    /// One line per step.
    pub fn to_text(&self) -> String {
        self.steps.iter().map(|s| format!("{s}\n")).collect()
    }
}

/// Inputs of one insertion run.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub source_video: &'a LatentGrid,
    pub reference: &'a LatentGrid,
    pub insert_prompt: &'a str,
    pub description: &'a str,
    pub style_prompt: &'a str,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Copy)]
pub struct GuidanceClients<'a> {
    pub vlm: &'a dyn VlmClient,
    pub motion: &'a dyn MotionEncoder,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub video: LatentGrid,
    pub image: LatentGrid,
    pub trace: Trace,
}

/// A failed run with the trace recorded up to the failure.
#[derive(Debug)]
pub struct SampleFailure {
    pub error: Error,
    pub trace: Trace,
}

impl fmt::Display for SampleFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} recorded steps)", self.error, self.trace.steps.len())
    }
}

impl std::error::Error for SampleFailure {}

impl From<Error> for SampleFailure {
    fn from(error: Error) -> Self {
        SampleFailure {
            error,
            trace: Trace::default(),
        }
    }
}

fn validate_request(model: &DualStreamModel, req: &SampleRequest<'_>) -> Result<()> {
    let c = model.config.latent_channels;
    if req.source_video.role() != Role::SourceVideo {
        return Err(Error::InvalidGrid(format!(
            "source video has role {:?}",
            req.source_video.role()
        )));
    }
    if req.reference.role() != Role::RawRefImage {
        return Err(Error::InvalidGrid(format!(
            "reference has role {:?}",
            req.reference.role()
        )));
    }
    for (name, g) in [("source video", req.source_video), ("reference", req.reference)] {
        if g.channels() != c {
            return Err(Error::InvalidGrid(format!(
                "{name} has {} channels, model expects {c}",
                g.channels()
            )));
        }
    }
    if req.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if req.insert_prompt.trim().is_empty() {
        return Err(Error::Config("insertion prompt is empty".into()));
    }
    Ok(())
}

/// Run both streams from pure noise to a clean estimate, refreshing guidance
/// from the image stream's one-step estimate on gated steps.
pub fn sample(
    model: &DualStreamModel,
    req: &SampleRequest<'_>,
    feedback: &FeedbackConfig,
    clients: GuidanceClients<'_>,
) -> std::result::Result<SampleOutput, SampleFailure> {
    validate_request(model, req)?;
    feedback.validate(req.steps)?;
    let mut fb = *feedback;
    fb.enabled &= !model.config.ablations.feedback_off;

    let cfg = &model.config;
    let vdims = req.source_video.dims();
    let idims = GridDims::new(1, vdims.height, vdims.width);
    let (vlayout, ilayout) = stream_layouts(cfg, vdims, req.reference.dims())?;
    let frame0 = req.source_video.frame(0, Role::SourceFirstFrame)?;
    let (src_tokens, _) = patchify(req.source_video);
    let (frame0_tokens, _) = patchify(&frame0);
    let (ref_tokens, _) = patchify(req.reference);

    let mut trace = Trace::default();
    let fail = |error: Error, trace: &Trace| SampleFailure {
        error,
        trace: trace.clone(),
    };

    let motion = motion_guidance(clients.motion, req.description).map_err(|e| fail(e, &trace))?;
    trace.initial_calls += 1;
    let insert =
        insert_guidance(clients.vlm, req.reference, &frame0, req.insert_prompt).map_err(|e| fail(e, &trace))?;
    trace.initial_calls += 1;
    let style = style_guidance(clients.vlm, req.reference, &frame0, req.style_prompt).map_err(|e| fail(e, &trace))?;
    trace.initial_calls += 1;
    let video_guidance = compose_video_guidance(&model.adapter, &motion, &insert).map_err(|e| fail(e, &trace))?;
    let image_guidance = style.adapted(&model.adapter).map_err(|e| fail(e, &trace))?;

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let c = cfg.latent_channels;
    let mut state = DenoiseState {
        t_index: req.steps - 1,
        steps: req.steps,
        sigma: 1.0,
        video_latent: Mat::randn(vdims.tokens(), c, 1.0, &mut rng),
        image_latent: Mat::randn(idims.tokens(), c, 1.0, &mut rng),
        video_guidance,
        image_guidance,
    };

    let predict = |state: &DenoiseState| -> Result<(Mat, Mat)> {
        let vt = Mat::concat_rows(&[&state.video_latent, &src_tokens, &state.image_latent])?;
        let it = Mat::concat_rows(&[&state.image_latent, &frame0_tokens, &ref_tokens])?;
        let out = model.dit_forward(
            StreamInput {
                layout: &vlayout,
                tokens: &vt,
                guidance: state.video_guidance.tokens(),
            },
            StreamInput {
                layout: &ilayout,
                tokens: &it,
                guidance: state.image_guidance.tokens(),
            },
            state.sigma,
        )?;
        Ok((out.video_velocity, out.image_velocity))
    };

    let mut gated_seen = 0usize;
    for t in (0..req.steps).rev() {
        state.t_index = t;
        state.sigma = sigma_at(t as isize, req.steps);
        let (mut v_video, mut v_image) = predict(&state).map_err(|e| fail(e, &trace))?;
        let gate = feedback_gate(t, &fb);
        let mut calls = 0;
        if gate {
            let refresh = gated_seen.is_multiple_of(fb.every);
            gated_seen += 1;
            if refresh {
                let x0 = one_step_x0(&state.image_latent, &v_image, state.sigma)
                    .and_then(|m| unpatchify(&m, idims, Role::TargetImageLatent))
                    .map_err(|e| fail(e, &trace))?;
                let step_fail = |e: Error, calls: usize, trace: &Trace| {
                    let mut t2 = trace.clone();
                    t2.steps.push(StepRecord {
                        t_index: t,
                        sigma: state.sigma,
                        gate,
                        calls,
                        video_norm: state.video_latent.norm(),
                        image_norm: state.image_latent.norm(),
                    });
                    SampleFailure { error: e, trace: t2 }
                };
                let fb_style = feedback_guidance(clients.vlm, FeedbackPrompt::Style(req.style_prompt), &x0, &frame0)
                    .map_err(|e| step_fail(e, calls, &trace))?;
                calls += 1;
                let fb_insert = feedback_guidance(clients.vlm, FeedbackPrompt::Insert(req.insert_prompt), &x0, &frame0)
                    .map_err(|e| step_fail(e, calls, &trace))?;
                calls += 1;
                state.image_guidance = fb_style.adapted(&model.adapter).map_err(|e| fail(e, &trace))?;
                state.video_guidance =
                    compose_video_guidance(&model.adapter, &motion, &fb_insert).map_err(|e| fail(e, &trace))?;
                (v_video, v_image) = predict(&state).map_err(|e| fail(e, &trace))?;
            }
        }
        let dsigma = state.sigma - sigma_at(t as isize - 1, req.steps);
        state.video_latent = state
            .video_latent
            .zip_map(&v_video, |x, v| x - dsigma * v)
            .map_err(|e| fail(e, &trace))?;
        state.image_latent = state
            .image_latent
            .zip_map(&v_image, |x, v| x - dsigma * v)
            .map_err(|e| fail(e, &trace))?;
        trace.steps.push(StepRecord {
            t_index: t,
            sigma: state.sigma,
            gate,
            calls,
            video_norm: state.video_latent.norm(),
            image_norm: state.image_latent.norm(),
        });
    }

    let video = unpatchify(&state.video_latent, vdims, Role::TargetVideoLatent).map_err(|e| fail(e, &trace))?;
    let image = unpatchify(&state.image_latent, idims, Role::TargetImageLatent).map_err(|e| fail(e, &trace))?;
    Ok(SampleOutput { video, image, trace })
}
