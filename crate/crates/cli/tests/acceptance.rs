//! Acceptance suite. One PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails. Every tolerance and time budget is pinned below.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use dualstream_core::attention::{attend, dual_stream_attend, AttentionMask, StreamKV};
use dualstream_core::curation::{load_manifest, persist_manifest, DataSource, Quadruplet, VerificationRecord};
use dualstream_core::engine::{
    batch_loss, euler_sample, one_step_x0, sample, stream_layouts, train_step, DiTConfig, DualStreamModel,
    FeedbackConfig, GuidanceClients, SampleRequest, StreamInput,
};
use dualstream_core::guidance::{select_guidance_tokens, StubMotionEncoder, StubVlm, VlmClient, VlmOutput};
use dualstream_core::rope::{apply_rope, assign_coordinates, Coord, RopeConfig};
use dualstream_core::selftest::{toy_inputs, toy_train_item};
use dualstream_core::tensor_file::read_grid;
use dualstream_core::{Error, GridDims, LatentGrid, Mat, Role, SegmentLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROPE_TOL: f64 = 1e-5;
const ISOLATION_TOL: f64 = 1e-7;
const ORACLE_TOL: f64 = 1e-6;
const X0_TOL: f64 = 1e-5;
const EULER_TOL: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_REL_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-3;
const LOSS_SPLIT_TOL: f64 = 1e-12;

const BUDGET_DISJOINT: Duration = Duration::from_secs(5);
const BUDGET_ROPE: Duration = Duration::from_secs(5);
const BUDGET_ISOLATION: Duration = Duration::from_secs(10);
const BUDGET_GRAD: Duration = Duration::from_secs(60);
const BUDGET_E2E: Duration = Duration::from_secs(60);

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        summary: summary.into(),
    }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn random_dims(rng: &mut ChaCha8Rng, max: usize) -> (GridDims, GridDims) {
    (
        GridDims::new(
            rng.random_range(1..=max),
            rng.random_range(1..=max),
            rng.random_range(1..=max),
        ),
        GridDims::new(1, rng.random_range(1..=max), rng.random_range(1..=max)),
    )
}

/// Expected (F, W, H) shift per segment, written out from the offset table.
fn expected_offsets(layout: &SegmentLayout) -> Vec<(i64, i64, i64)> {
    let t = layout.target().dims;
    let (n, w) = (t.frames as i64, t.width as i64);
    layout
        .segments()
        .iter()
        .map(|s| match s.role {
            Role::TargetVideoLatent | Role::TargetImageLatent => (0, 0, 0),
            Role::SourceVideo => (0, w, 0),
            Role::TargetRefImage => (n, 2 * w, 0),
            Role::SourceFirstFrame => (0, w, 0),
            Role::RawRefImage => (1, 0, 0),
        })
        .collect()
}

fn oracle_coords(layout: &SegmentLayout, offsets: &[(i64, i64, i64)]) -> Vec<Coord> {
    let mut out = Vec::new();
    for (seg, &(df, dw, dh)) in layout.segments().iter().zip(offsets) {
        let d = seg.dims;
        for f in 0..d.frames {
            for y in 0..d.height {
                for x in 0..d.width {
                    out.push(Coord::new(f as i64 + df, x as i64 + dw, y as i64 + dh));
                }
            }
        }
    }
    out
}

fn collisions(layout: &SegmentLayout, coords: &[Coord]) -> usize {
    let mut hits = 0;
    for (i, a) in layout.segments().iter().enumerate() {
        let mine: HashSet<Coord> = coords[a.span.clone()].iter().copied().collect();
        for b in &layout.segments()[i + 1..] {
            hits += coords[b.span.clone()].iter().filter(|c| mine.contains(c)).count();
        }
    }
    hits
}

fn c1_disjointness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dual = DiTConfig::default();
    let mut append = DiTConfig::default();
    append.ablations.fulldit_rope = true;
    let (mut hits, mut mismatched, mut adjacency_fail, mut spatial_shared) = (0, 0, 0, 0usize);
    for _ in 0..100 {
        let (v, r) = random_dims(&mut rng, 8);
        let (vl, il) = stream_layouts(&dual, v, r).unwrap();
        for layout in [&vl, &il] {
            let coords = assign_coordinates(layout);
            if coords != oracle_coords(layout, &expected_offsets(layout)) {
                mismatched += 1;
            }
            hits += collisions(layout, &coords);
        }
        let (avl, ail) = stream_layouts(&append, v, r).unwrap();
        for layout in [&avl, &ail] {
            let coords = assign_coordinates(layout);
            let t = layout.target();
            let first = &layout.segments()[1];
            let t_max_f = coords[t.span.clone()].iter().map(|c| c.f).max().unwrap();
            let c_fs: HashSet<i64> = coords[first.span.clone()].iter().map(|c| c.f).collect();
            let c_min_f = *c_fs.iter().min().unwrap();
            let offset_ok = coords[first.span.clone()]
                .iter()
                .zip(oracle_coords(layout, &[(0, 0, 0); 3])[first.span.clone()].iter())
                .all(|(c, base)| c.f - base.f == t.dims.frames as i64 && c.w == base.w && c.h == base.h);
            if c_min_f != t_max_f + 1 || !offset_ok {
                adjacency_fail += 1;
            }
            let target_spatial: HashSet<(i64, i64)> = coords[t.span.clone()].iter().map(|c| (c.w, c.h)).collect();
            spatial_shared += coords[first.span.clone()]
                .iter()
                .filter(|c| target_spatial.contains(&(c.w, c.h)))
                .count();
        }
    }
    let elapsed = start.elapsed();
    let pass =
        hits == 0 && mismatched == 0 && adjacency_fail == 0 && spatial_shared > 0 && within(elapsed, BUDGET_DISJOINT);
    outcome(
        pass,
        format!(
            "collisions={hits} offset_mismatches={mismatched}; frame-append: adjacency_failures={adjacency_fail} \
             spatially_shared_tokens={spatial_shared}; {elapsed:.2?} (budget {BUDGET_DISJOINT:?})"
        ),
    )
}

/// Consecutive-pair rotation with frame, height, width blocks.
fn oracle_rotate(x: &[f64], c: Coord, split: (usize, usize, usize), base: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    let mut pair = 0;
    for (d, pos) in [(split.0, c.f), (split.1, c.h), (split.2, c.w)] {
        for i in 0..d / 2 {
            let theta = base.powf(-2.0 * i as f64 / d as f64);
            let (s, co) = (pos as f64 * theta).sin_cos();
            let (a, b) = (x[2 * pair], x[2 * pair + 1]);
            out[2 * pair] = a * co - b * s;
            out[2 * pair + 1] = a * s + b * co;
            pair += 1;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn c2_rope_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut rel, mut norm, mut vs_oracle) = (0.0f64, 0.0f64, 0.0f64);
    let mut draws = 0;
    for hd in [16usize, 64] {
        let cfg = RopeConfig::for_head_dim(hd).unwrap();
        for _ in 0..1000 {
            let mut coord = || {
                Coord::new(
                    rng.random_range(0..=32),
                    rng.random_range(0..=32),
                    rng.random_range(0..=32),
                )
            };
            let (p1, p2) = (coord(), coord());
            let q = Mat::randn(1, hd, 1.0, &mut rng);
            let k = Mat::randn(1, hd, 1.0, &mut rng);
            let rq = apply_rope(&q, &[p1], &cfg).unwrap();
            let rk = apply_rope(&k, &[p2], &cfg).unwrap();
            let rk_rel = apply_rope(&k, &[p2 - p1], &cfg).unwrap();
            rel = rel.max((dot(rq.data(), rk.data()) - dot(q.data(), rk_rel.data())).abs());
            norm = norm.max((rq.norm() - q.norm()).abs());
            let o = oracle_rotate(q.data(), p1, (hd / 2, hd / 4, hd / 4), 10_000.0);
            vs_oracle = vs_oracle.max(o.iter().zip(rq.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            draws += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = rel <= ROPE_TOL && norm <= ROPE_TOL && vs_oracle <= ROPE_TOL && within(elapsed, BUDGET_ROPE);
    outcome(
        pass,
        format!(
            "{draws} draws: max relative-identity gap={rel:.3e} norm drift={norm:.3e} vs reference rotation={vs_oracle:.3e} \
             (tol {ROPE_TOL:.0e}); {elapsed:.2?}"
        ),
    )
}

/// Rule-derived mask: target rows see everything, condition rows their own
/// segment only, injected columns visible to target rows only.
fn oracle_mask(layout: &SegmentLayout, injected: usize) -> Vec<Vec<bool>> {
    let n = layout.total_tokens();
    let seg = |k: usize| layout.segments().iter().position(|s| s.span.contains(&k)).unwrap();
    (0..n)
        .map(|i| {
            (0..n + injected)
                .map(|j| seg(i) == 0 || (j < n && seg(j) == seg(i)))
                .collect()
        })
        .collect()
}

fn brute_attention(q: &Mat, k: &Mat, v: &Mat, mask: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    (0..q.rows())
        .map(|i| {
            let s: Vec<f64> = (0..k.rows()).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
            let m = (0..k.rows())
                .filter(|&j| mask[i][j])
                .map(|j| s[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = (0..k.rows())
                .map(|j| if mask[i][j] { (s[j] - m).exp() } else { 0.0 })
                .collect();
            let z: f64 = w.iter().sum();
            (0..v.cols())
                .map(|c| (0..k.rows()).map(|j| w[j] / z * v.get(j, c)).sum())
                .collect()
        })
        .collect()
}

fn mask_from(rows: &[Vec<bool>]) -> AttentionMask {
    let cols = rows[0].len();
    AttentionMask::new(rows.len(), cols, rows.concat()).unwrap()
}

fn condition_drift(layout: &SegmentLayout, a: &Mat, b: &Mat) -> f64 {
    let t = layout.target().span.clone();
    (t.end..a.rows())
        .flat_map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn c3_isolation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DiTConfig::default();
    let (mut drift, mut oracle_gap, mut oracle_runs, mut layouts) = (0.0f64, 0.0f64, 0, 0);
    let d = 8;
    while layouts < 50 {
        let (v, r) = random_dims(&mut rng, 4);
        let (vl, il) = stream_layouts(&cfg, v, r).unwrap();
        for layout in [&vl, &il] {
            layouts += 1;
            let n = layout.total_tokens();
            let rows = oracle_mask(layout, 0);
            let mask = mask_from(&rows);
            let (q, k, x) = (
                Mat::randn(n, d, 1.0, &mut rng),
                Mat::randn(n, d, 1.0, &mut rng),
                Mat::randn(n, d, 1.0, &mut rng),
            );
            let base = attend(&q, &k, &x, &mask).unwrap();
            let (mut q2, mut k2, mut x2) = (q.clone(), k.clone(), x.clone());
            for t in layout.target().span.clone() {
                for m in [&mut q2, &mut k2, &mut x2] {
                    m.row_mut(t).iter_mut().for_each(|e| *e = rng.random_range(-4.0..4.0));
                }
            }
            let swapped = attend(&q2, &k2, &x2, &mask).unwrap();
            drift = drift.max(condition_drift(layout, &base, &swapped));
            if n <= 64 {
                oracle_runs += 1;
                let want = brute_attention(&q, &k, &x, &rows);
                for (i, row) in want.iter().enumerate() {
                    for (c, w) in row.iter().enumerate() {
                        oracle_gap = oracle_gap.max((w - base.get(i, c)).abs());
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass =
        drift <= ISOLATION_TOL && oracle_gap <= ORACLE_TOL && oracle_runs > 0 && within(elapsed, BUDGET_ISOLATION);
    outcome(
        pass,
        format!(
            "{layouts} layouts: condition drift={drift:.3e} (tol {ISOLATION_TOL:.0e}); brute-force gap={oracle_gap:.3e} \
             over {oracle_runs} sequences (tol {ORACLE_TOL:.0e}); {elapsed:.2?}"
        ),
    )
}

fn c4_injection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = DiTConfig::default();
    let model = DualStreamModel::new(cfg.clone()).unwrap();
    let (mut drift, mut min_target_change, mut shape_fail, mut oracle_gap) = (0.0f64, f64::INFINITY, 0, 0.0f64);
    for _ in 0..20 {
        let (v, r) = random_dims(&mut rng, 3);
        let (vl, il) = stream_layouts(&cfg, v, r).unwrap();
        let (n, m, d) = (vl.total_tokens(), il.total_tokens(), 8);
        let (q, k, x) = (
            Mat::randn(n, d, 1.0, &mut rng),
            Mat::randn(n, d, 1.0, &mut rng),
            Mat::randn(n, d, 1.0, &mut rng),
        );
        let (ik, iv) = (Mat::randn(m, d, 1.0, &mut rng), Mat::randn(m, d, 1.0, &mut rng));
        let kv = StreamKV::new(ik.clone(), iv.clone(), il.clone()).unwrap();
        let with = dual_stream_attend(&q, &k, &x, &vl, Some(&kv)).unwrap();
        let without = dual_stream_attend(&q, &k, &x, &vl, None).unwrap();
        if with.shape() != (n, d) || without.shape() != (n, d) {
            shape_fail += 1;
        }
        drift = drift.max(condition_drift(&vl, &with, &without));
        let t = vl.target().span.clone();
        let change = t
            .clone()
            .flat_map(|r| {
                with.row(r)
                    .iter()
                    .zip(without.row(r))
                    .map(|(a, b)| (a - b).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        min_target_change = min_target_change.min(change);

        let full_k = Mat::concat_rows(&[&k, &ik]).unwrap();
        let full_v = Mat::concat_rows(&[&x, &iv]).unwrap();
        let want = brute_attention(&q, &full_k, &full_v, &oracle_mask(&vl, m));
        for (i, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                oracle_gap = oracle_gap.max((w - with.get(i, c)).abs());
            }
        }

        let c = cfg.latent_channels;
        let out = model
            .dit_forward(
                StreamInput {
                    layout: &vl,
                    tokens: &Mat::randn(n, c, 1.0, &mut rng),
                    guidance: &Mat::randn(4, cfg.guidance_dim, 1.0, &mut rng),
                },
                StreamInput {
                    layout: &il,
                    tokens: &Mat::randn(m, c, 1.0, &mut rng),
                    guidance: &Mat::randn(3, cfg.guidance_dim, 1.0, &mut rng),
                },
                0.5,
            )
            .unwrap();
        let kv_ok = out.image_kv.len() == cfg.depth
            && out
                .image_kv
                .iter()
                .all(|kv| kv.keys().shape() == (m, cfg.model_dim) && kv.values().shape() == (m, cfg.model_dim));
        if out.video_velocity.shape() != (v.tokens(), c)
            || out.image_velocity.shape() != (v.height * v.width, c)
            || !kv_ok
        {
            shape_fail += 1;
        }
    }
    let pass = drift <= ISOLATION_TOL && min_target_change > 0.0 && shape_fail == 0 && oracle_gap <= ORACLE_TOL;
    outcome(
        pass,
        format!(
            "20 dims: condition drift={drift:.3e} (tol {ISOLATION_TOL:.0e}); min target change={min_target_change:.3e}; \
             injected brute-force gap={oracle_gap:.3e}; shape failures={shape_fail}"
        ),
    )
}

fn c5_x0_and_sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x0_err = 0.0f64;
    for s in 1..=9 {
        let sigma = s as f64 / 10.0;
        let x0 = Mat::randn(16, 8, 1.0, &mut rng);
        let eps = Mat::randn(16, 8, 1.0, &mut rng);
        let xt = Mat::from_vec(
            16,
            8,
            x0.data()
                .iter()
                .zip(eps.data())
                .map(|(a, e)| (1.0 - sigma) * a + sigma * e)
                .collect(),
        )
        .unwrap();
        let v = Mat::from_vec(16, 8, eps.data().iter().zip(x0.data()).map(|(e, a)| e - a).collect()).unwrap();
        let est = one_step_x0(&xt, &v, sigma).unwrap();
        x0_err = x0_err.max(
            est.data()
                .iter()
                .zip(x0.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    let mut euler_err = Vec::new();
    for steps in [1usize, 5, 50] {
        let x0 = Mat::randn(16, 8, 1.0, &mut rng);
        let eps = Mat::randn(16, 8, 1.0, &mut rng);
        // Velocity of the straight path through the current point.
        let out = euler_sample(&eps, steps, |x, sigma, _| {
            Ok(Mat::from_vec(
                16,
                8,
                x.data().iter().zip(x0.data()).map(|(xi, a)| (xi - a) / sigma).collect(),
            )
            .unwrap())
        })
        .unwrap();
        euler_err.push(
            out.data()
                .iter()
                .zip(x0.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    let worst = euler_err.iter().cloned().fold(0.0, f64::max);
    outcome(
        x0_err <= X0_TOL && worst <= EULER_TOL,
        format!(
            "x0 error={x0_err:.3e} (tol {X0_TOL:.0e}); Euler error T=1,5,50: {:.3e} {:.3e} {:.3e} (tol {EULER_TOL:.0e})",
            euler_err[0], euler_err[1], euler_err[2]
        ),
    )
}

/// Counts every query that reaches the VLM.
struct Counting<'a> {
    inner: &'a StubVlm,
    calls: AtomicUsize,
}

impl VlmClient for Counting<'_> {
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    fn query(&self, prompt: &str, images: &[&LatentGrid]) -> dualstream_core::Result<VlmOutput> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.query(prompt, images)
    }
}

fn c6_gating() -> Outcome {
    let cfg = DiTConfig {
        latent_channels: 16,
        ..DiTConfig::default()
    };
    let model = DualStreamModel::new(cfg.clone()).unwrap();
    let (video, reference) = toy_inputs(GridDims::new(2, 2, 2), GridDims::new(1, 2, 2), 16, 6).unwrap();
    let stub = StubVlm::new(6, cfg.vlm_dim);
    let motion = StubMotionEncoder {
        seed: 6,
        dim: cfg.guidance_dim,
    };
    let mut lines = Vec::new();
    let mut pass = true;
    for (steps, t_start, enabled, want_gated, want_calls) in [
        (50, 30, true, 20, 40),
        (10, 6, true, 4, 8),
        (50, 30, false, 0, 0),
        (10, 6, false, 0, 0),
    ] {
        let vlm = Counting {
            inner: &stub,
            calls: AtomicUsize::new(0),
        };
        let req = SampleRequest {
            source_video: &video,
            reference: &reference,
            insert_prompt: "Insert the vase near the centre.",
            description: "A sunlit kitchen.",
            style_prompt: dualstream_core::guidance::STYLE_PROMPT,
            steps,
            seed: 6,
        };
        let out = sample(
            &model,
            &req,
            &FeedbackConfig::new(t_start, enabled),
            GuidanceClients {
                vlm: &vlm,
                motion: &motion,
            },
        )
        .unwrap();
        let gated = out.trace.steps.iter().filter(|s| s.gate).count();
        let oracle_gated = (0..steps).filter(|&t| enabled && t >= t_start).count();
        // two initial guidance queries (insert and style) precede the loop
        let feedback_calls = vlm.calls.load(Ordering::SeqCst) - 2;
        let ok = gated == want_gated && gated == oracle_gated && feedback_calls == want_calls;
        pass &= ok;
        lines.push(format!(
            "T={steps} t_start={t_start} {}: gated={gated} calls={feedback_calls}",
            if enabled { "on" } else { "off" }
        ));
    }
    outcome(pass, lines.join("; "))
}

fn c7_token_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut patterns = 0;
    while patterns < 100 {
        let n = rng.random_range(1..24);
        let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if flags.iter().all(|&f| f) {
            continue;
        }
        patterns += 1;
        let tokens = Mat::randn(n, 6, 1.0, &mut rng);
        let want: Vec<&[f64]> = tokens
            .data()
            .chunks(6)
            .zip(&flags)
            .filter(|(_, &p)| !p)
            .map(|(r, _)| r)
            .collect();
        let got = select_guidance_tokens(&tokens, &flags).unwrap();
        if got.rows() != want.len() || got.data() != want.concat().as_slice() {
            mismatches += 1;
        }
    }
    let empty = matches!(
        select_guidance_tokens(&Mat::zeros(4, 6), &[true; 4]),
        Err(Error::EmptyGuidance)
    );
    outcome(
        mismatches == 0 && empty,
        format!("{patterns} patterns: mismatches={mismatches}; all-prompt raises empty-guidance: {empty}"),
    )
}

fn c8_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = DiTConfig::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut split_gap = 0.0f64;
    for seed in 0..5u64 {
        let model = DualStreamModel::new(DiTConfig { seed, ..cfg.clone() }).unwrap();
        let batch = vec![
            toy_train_item(&model.config, seed).unwrap(),
            toy_train_item(&model.config, seed + 50).unwrap(),
        ];
        let out = train_step(&model, &batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80 + seed);
        for (ti, (_, g)) in out.gradients.named().iter().enumerate() {
            for _ in 0..2 {
                let k = rng.random_range(0..g.data().len());
                let plus = batch_loss(&model, &model.weights.perturbed(ti, k, FD_STEP), &batch).unwrap();
                let minus = batch_loss(&model, &model.weights.perturbed(ti, k, -FD_STEP), &batch).unwrap();
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let analytic = g.data()[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        let mut single = model.clone();
        single.config.ablations.single_stream = true;
        let s = train_step(&single, &batch).unwrap();
        split_gap = split_gap.max((out.loss - s.loss - out.image_term).abs() / out.loss.abs().max(1.0));
    }
    let elapsed = start.elapsed();
    let pass = worst <= GRAD_REL_TOL && split_gap <= LOSS_SPLIT_TOL && within(elapsed, BUDGET_GRAD);
    outcome(
        pass,
        format!(
            "dim-64 model, 5 seeds, {checked} entries: max rel error={worst:.3e} (tol {GRAD_REL_TOL:.0e}, h={FD_STEP:.0e}); \
             single_stream loss gap vs image term={split_gap:.3e} (tol {LOSS_SPLIT_TOL:.0e}); {elapsed:.2?}"
        ),
    )
}

fn adversarial(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 12] = [
        "\\", "\n", "\r\n", "\u{1f}", "=", "\"", "'", "\\u", "\\n", "ü", "tab\t", "plain ",
    ];
    (0..rng.random_range(0..10))
        .map(|_| PIECES[rng.random_range(0..PIECES.len())])
        .collect()
}

fn c9_consensus() -> Outcome {
    let mut accepted_rows = Vec::new();
    for bits in 0u32..256 {
        let a = [0, 1, 2, 3].map(|i| bits >> i & 1 == 1);
        let b = [4, 5, 6, 7].map(|i| bits >> i & 1 == 1);
        if VerificationRecord::new(a, b).accepted() {
            accepted_rows.push(bits);
        }
    }
    let table_ok = accepted_rows == [255];

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let quads: Vec<Quadruplet> = (0..50)
        .map(|i| Quadruplet {
            id: format!("item{i}{}", adversarial(&mut rng)),
            provenance: if i % 2 == 0 {
                DataSource::SynthesizedFromT2V
            } else {
                DataSource::AdaptedEditingDataset
            },
            source_video: format!("{i}/source {}.dsi", adversarial(&mut rng)).into(),
            target_video: format!("{i}/target.dsi").into(),
            raw_ref: format!("{i}/raw_ref.dsi").into(),
            harmonized_ref: format!("{i}/harmonized_ref.dsi").into(),
            p_insert: format!("Insert \"it\" {}", adversarial(&mut rng)),
            p_desc: adversarial(&mut rng),
            p_style: adversarial(&mut rng),
            verification: match i % 3 {
                0 => None,
                _ => Some(VerificationRecord::new(
                    [0; 4].map(|_| rng.random_bool(0.85)),
                    [0; 4].map(|_| rng.random_bool(0.85)),
                )),
            },
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.txt");
    persist_manifest(&quads, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    let differing = quads.iter().zip(&back).filter(|(a, b)| a != b).count() + quads.len().abs_diff(back.len());
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    outcome(
        table_ok && differing == 0 && lines == 50,
        format!(
            "truth table accepted rows={accepted_rows:?}; manifest round-trip: {} records, {lines} lines, differing={differing}",
            quads.len()
        ),
    )
}

fn run_sample(bin: &str, input: &Path, out: &Path) -> std::process::Output {
    Command::new(bin)
        .args([
            "sample",
            "--source",
            input.join("source.dsi").to_str().unwrap(),
            "--reference",
            input.join("reference.dsi").to_str().unwrap(),
            "--p-insert",
            "Insert the teapot on the right of the table.",
            "--p-desc",
            "A slow pan across a kitchen.",
            "--steps",
            "10",
            "--t-start",
            "6",
            "--depth",
            "2",
            "--seed",
            "10",
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap()
}

fn c10_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_dualstream");
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let toy = Command::new(bin)
        .args([
            "toy-inputs",
            "--out-dir",
            input.to_str().unwrap(),
            "--frames",
            "4",
            "--height",
            "2",
            "--width",
            "4",
        ])
        .args(["--channels", "16", "--seed", "10"])
        .output()
        .unwrap();
    if !toy.status.success() {
        return outcome(
            false,
            format!("toy-inputs failed: {}", String::from_utf8_lossy(&toy.stderr)),
        );
    }
    let start = Instant::now();
    let a = run_sample(bin, &input, &dir.path().join("a"));
    let b = run_sample(bin, &input, &dir.path().join("b"));
    let elapsed = start.elapsed();
    if !a.status.success() || !b.status.success() {
        return outcome(false, format!("sample failed: {}", String::from_utf8_lossy(&a.stderr)));
    }
    let mut identical = true;
    for f in ["video.dsi", "image.dsi", "trace.txt"] {
        identical &= std::fs::read(dir.path().join("a").join(f)).unwrap()
            == std::fs::read(dir.path().join("b").join(f)).unwrap();
    }
    let video = read_grid(dir.path().join("a/video.dsi")).unwrap();
    let image = read_grid(dir.path().join("a/image.dsi")).unwrap();
    let finite = video.data().iter().chain(image.data()).all(|v| v.is_finite());
    let dims_ok =
        video.dims() == GridDims::new(4, 2, 4) && video.channels() == 16 && image.dims() == GridDims::new(1, 2, 4);
    outcome(
        identical && finite && dims_ok && within(elapsed, BUDGET_E2E),
        format!("bit-identical={identical} finite={finite} shapes_ok={dims_ok}; two runs {elapsed:.2?} (budget {BUDGET_E2E:?})"),
    )
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("1 dual-rope disjointness", c1_disjointness),
        ("2 rope relative-position identity", c2_rope_identity),
        ("3 semi-attention condition isolation", c3_isolation),
        ("4 dual-stream injection", c4_injection),
        ("5 one-step x0 and sampler", c5_x0_and_sampler),
        ("6 feedback gating", c6_gating),
        ("7 token selection", c7_token_selection),
        ("8 gradient check", c8_gradients),
        ("9 curation consensus and manifest", c9_consensus),
        ("10 end-to-end determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = std::panic::catch_unwind(check).unwrap_or_else(|_| outcome(false, "panicked"));
        println!("{} [{name}] {}", if o.pass { "PASS" } else { "FAIL" }, o.summary);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
