//! Acceptance suite: one pass/fail line per criterion.
//!
//! cargo test --release --test acceptance

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use gen3d::camera::{build_voxel_grid, frustum_points, project, sample_view_features, uniform_azimuths, Intrinsics};
use gen3d::conditioning::{sample_frustum, HybridVolume};
use gen3d::data::backends::{Embedder, LookupClassifier, LookupEmbedder, RandomConvEmbedder};
use gen3d::data::prune::{identity_consistency_filter, janus_filter, prune, DEFAULT_TAU_BV, DEFAULT_TAU_II};
use gen3d::data::{generate_corpus, generate_corpus_with_defects, is_back_view, DataMix, IdentityRecord, Planted};
use gen3d::denoiser::{AttentionMode, AttentionParams};
use gen3d::diffusion::{build_schedule, ddim_step, default_beta_range, forward_diffuse, posterior_mean, MultiViewState};
use gen3d::imageio::tensor_to_images;
use gen3d::metrics::{evaluate, fid, o2oid, reid_from_embeddings, ssim, EvalIdentity, FeatureStats, MetricBackends, REID_THRESHOLD};
use gen3d::model::{Condition, EpsPredictor, Gen3dModel, ModelConfig, PlantedOracle, ZeroPredictor};
use gen3d::nn::{ParamBuilder, ParamGroup};
use gen3d::rng::SeededRng;
use gen3d::training::{
    build_examples, fit, loss_for_draw, lr_at, sample_view_subset, sample_views, Checkpoint, FitOptions, LossDraw, LrSchedule,
    TrainConfig, TrainExample,
};
use nalgebra::{DMatrix, DVector};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        grid_size: 4,
        context_channels: 3,
        context_down: 1,
        geometry_channels: 3,
        frustum_size: 4,
        depth_samples: 4,
        frustum_channels: 2,
        base_channels: 4,
        attention_max_size: 4,
        ..ModelConfig::desk()
    }
}

fn tiny_train(dtype: &str) -> TrainConfig {
    TrainConfig { views: 4, subset: 2, steps: 8, warmup: 4, checkpoint_every: 0, dtype: dtype.into(), model: tiny_model(), ..TrainConfig::desk() }
}

fn toy_records(count: usize, seed: u64, size: usize) -> Vec<IdentityRecord> {
    generate_corpus(count, seed, DataMix::Both, size).unwrap()
}

fn criterion_1() -> Outcome {
    let s = build_schedule(1, 0.5, 0.5).map_err(e)?;
    check!(s.alpha_bar(1) == 0.5 && s.alpha(1) == 0.5, "T=1 schedule gave {} / {}", s.alpha_bar(1), s.alpha(1));
    let s = build_schedule(3, 0.1, 0.3).map_err(e)?;
    let oracle = (1.0 - 0.1) * (1.0 - 0.2) * (1.0 - 0.3);
    check!((s.alpha_bar(3) - oracle).abs() < 1e-12 && (oracle - 0.504f64).abs() < 1e-12, "abar_3 = {}", s.alpha_bar(3));
    let (lo, hi) = default_beta_range(100);
    let s100 = build_schedule(100, lo, hi).map_err(e)?;
    check!((1..100).all(|t| s100.alpha_bar(t + 1) < s100.alpha_bar(t)), "alpha_bar not strictly decreasing");

    let dev = Device::Cpu;
    let ab = 0.64;
    let s = gen3d::diffusion::NoiseSchedule::from_betas(vec![1.0 - ab]).map_err(e)?;
    let pose = ModelConfig::desk().pose(0.0).map_err(e)?;
    let x0 = MultiViewState::new(Tensor::full(0.5f64, (1, 3, 2, 2), &dev).map_err(e)?, 0, vec![pose]).map_err(e)?;
    let ones = Tensor::ones((1, 3, 2, 2), DType::F64, &dev).map_err(e)?;
    let xt = forward_diffuse(&x0, 1, &ones, &s).map_err(e)?;
    check!(values(&xt.views).iter().all(|v| (v - 1.0).abs() < 1e-12), "forward_diffuse scalar case");
    let xt0 = forward_diffuse(&x0, 1, &ones.zeros_like().map_err(e)?, &s).map_err(e)?;
    check!(values(&xt0.views).iter().all(|v| (v - 0.8 * 0.5).abs() < 1e-12), "forward_diffuse zero-noise case");

    let s = gen3d::diffusion::NoiseSchedule::from_betas(vec![0.19]).map_err(e)?;
    let x = Tensor::full(0.9f64, (1, 3, 2, 2), &dev).map_err(e)?;
    let m = posterior_mean(&x, &ones, 1, &s).map_err(e)?;
    let oracle = (0.9 - 0.19 / 0.19f64.sqrt()) / 0.9;
    check!(values(&m).iter().all(|v| (v - oracle).abs() < 1e-12 && (v - 0.51568).abs() < 1e-5), "posterior_mean scalar case");

    // q-posterior mean of x_{t-1} given x_t and x0, from the forward marginals.
    let mut rng = SeededRng::new(11);
    let x0 = rng.normal_tensor(&[2, 3, 4, 4], DType::F64).map_err(e)?;
    let eps = rng.normal_tensor(&[2, 3, 4, 4], DType::F64).map_err(e)?;
    let poses = vec![pose; 2];
    let state = MultiViewState::new(x0.clone(), 0, poses.clone()).map_err(e)?;
    let mut worst_q = 0.0f64;
    for t in [1usize, 7, 50, 100] {
        let xt = forward_diffuse(&state, t, &eps, &s100).map_err(e)?;
        let m = values(&posterior_mean(&xt.views, &eps, t, &s100).map_err(e)?);
        let (abar, abar_prev, a, b) = (s100.alpha_bar(t), if t == 1 { 1.0 } else { s100.alpha_bar(t - 1) }, s100.alpha(t), s100.beta(t));
        let c0 = abar_prev.sqrt() * b / (1.0 - abar);
        let ct = a.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
        for ((mv, x0v), xtv) in m.iter().zip(values(&x0)).zip(values(&xt.views)) {
            worst_q = worst_q.max((mv - (c0 * x0v + ct * xtv)).abs());
        }
    }
    check!(worst_q < 1e-9, "q-posterior oracle error {worst_q:e}");

    let x0 = rng.normal_tensor(&[4, 3, 8, 8], DType::F64).map_err(e)?;
    let eps = rng.normal_tensor(&[4, 3, 8, 8], DType::F64).map_err(e)?;
    let poses = vec![pose; 4];
    let start = forward_diffuse(&MultiViewState::new(x0.clone(), 0, poses.clone()).map_err(e)?, 100, &eps, &s100).map_err(e)?;
    let oracle = PlantedOracle { x0: x0.clone(), schedule: s100.clone() };
    let cond = Condition { y: x0.narrow(0, 0, 1).map_err(e)?, y_pose: pose, geometry: dummy_geometry()? };
    let views = [0, 1, 2, 3];
    let mut chain = start.clone();
    while chain.t > 0 {
        let eps_hat = oracle.predict(&chain.views, chain.t, &views, &poses, &cond).map_err(e)?;
        chain = ddim_step(&chain, &eps_hat, chain.t - 1, 0.0, &s100, &mut rng).map_err(e)?;
    }
    let eps_hat = oracle.predict(&start.views, 100, &views, &poses, &cond).map_err(e)?;
    let jump = ddim_step(&start, &eps_hat, 0, 0.0, &s100, &mut rng).map_err(e)?;
    let (err_chain, err_jump, err_cj) = (max_abs_diff(&chain.views, &x0), max_abs_diff(&jump.views, &x0), max_abs_diff(&chain.views, &jump.views));
    check!(err_chain < 1e-5 && err_jump < 1e-6 && err_cj < 1e-5, "DDIM recovery errors chain {err_chain:e} jump {err_jump:e}");
    Ok(format!("q-posterior err {worst_q:.1e}, DDIM chain err {err_chain:.1e}, jump err {err_jump:.1e}"))
}

fn dummy_geometry() -> Result<gen3d::conditioning::SparseGeometry, String> {
    let grid = build_voxel_grid(4, 1.0).map_err(e)?;
    let mesh = gen3d::mesh::HeadMesh { vertices: vec![[0.0, 0.0, 0.0]], provider: "point".into() };
    gen3d::conditioning::SparseGeometry::new(&gen3d::mesh::voxelize_mesh(&mesh, &grid), DType::F64).map_err(e)
}

fn criterion_2() -> Outcome {
    let cfg = tiny_train("f64");
    let sched = cfg.schedule().map_err(e)?;
    let examples = build_examples(&toy_records(1, 5, 16), &cfg).map_err(e)?;
    let ex = &examples[0];
    let mut rng = SeededRng::new(21);

    let oracle = PlantedOracle { x0: ex.targets.clone(), schedule: sched.clone() };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let draw = LossDraw::sample(ex, cfg.subset, &sched, &mut rng).map_err(e)?;
        worst = worst.max(values(&loss_for_draw(ex, &draw, &oracle, &sched).map_err(e)?)[0].abs());
    }
    check!(worst <= 1e-10, "perfect-predictor loss {worst:e}");

    // Monte Carlo reference for E||eps|| over the per-view dimension.
    let d = ex.targets.dims()[1..].iter().product::<usize>();
    let mut mc = SeededRng::new(0xabc);
    let norms: Vec<f64> = (0..10_000).map(|_| mc.normals(d).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (norms.len() - 1) as f64;
    let draws = 500;
    let mut total = 0.0;
    for _ in 0..draws {
        let draw = LossDraw::sample(ex, cfg.subset, &sched, &mut rng).map_err(e)?;
        total += values(&loss_for_draw(ex, &draw, &ZeroPredictor, &sched).map_err(e)?)[0];
    }
    let zero = total / draws as f64;
    let sigma = (var / (draws * cfg.subset) as f64 + var / norms.len() as f64).sqrt();
    check!((zero - mean).abs() <= 3.0 * sigma, "zero-predictor loss {zero} vs MC {mean} (sigma {sigma})");

    let model = Gen3dModel::new(&cfg.model, 3, DType::F64).map_err(e)?;
    let draw = LossDraw::sample(ex, cfg.subset, &sched, &mut rng).map_err(e)?;
    let loss = loss_for_draw(ex, &draw, &model, &sched).map_err(e)?;
    let grads = loss.backward().map_err(e)?;
    let h = 1e-5;
    let mut checked = 0;
    let mut worst_rel = 0.0f64;
    let mut worst_name = String::new();
    for (name, var) in model.store.iter() {
        let base = values(var.as_tensor());
        let n = base.len();
        let analytic = grads.get(var.as_tensor()).map(values).unwrap_or_else(|| vec![0.0; n]);
        let picks: BTreeSet<usize> = [0, n / 3, n / 2, n - 1].into_iter().collect();
        for i in picks {
            let eval = |delta: f64| -> Result<f64, String> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).map_err(e)?).map_err(e)?;
                Ok(values(&loss_for_draw(ex, &draw, &model, &sched).map_err(e)?)[0])
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            eval(0.0)?;
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst_rel {
                worst_rel = rel;
                worst_name = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
            checked += 1;
        }
    }
    check!(worst_rel <= 1e-3, "gradient check failed at {worst_name}: rel {worst_rel:e}");
    Ok(format!(
        "zero-predictor {zero:.3} vs MC {mean:.3} (3 sigma {:.3}); {checked} FD entries over {} tensors, worst rel {worst_rel:.1e}",
        3.0 * sigma,
        model.store.len()
    ))
}

fn criterion_3() -> Outcome {
    let cfg = ModelConfig::desk();
    let mut model = Gen3dModel::new(&cfg, 9, DType::F64).map_err(e)?;
    let rec = &toy_records(1, 4, 32)[0];
    let cond = Condition::from_image(&rec.view_at(0.0).unwrap().image, 0.0, &cfg, "toy-parametric", &cfg.mesh_providers(), DType::F64)
        .map_err(e)?;
    let poses: Vec<_> = [-135.0, -30.0, 60.0, 150.0].iter().map(|&a| cfg.pose(a).unwrap()).collect();
    let mut rng = SeededRng::new(31);
    let x = rng.normal_tensor(&[4, 3, 32, 32], DType::F64).map_err(e)?;
    let out = model.predict(&x, 57, &[0, 1, 2, 3], &poses, &cond).map_err(e)?;
    let perm = [2u32, 0, 3, 1];
    let idx = Tensor::new(&perm, &Device::Cpu).map_err(e)?;
    let pposes: Vec<_> = perm.iter().map(|&p| poses[p as usize]).collect();
    let pout = model.predict(&x.index_select(&idx, 0).map_err(e)?, 57, &[0, 1, 2, 3], &pposes, &cond).map_err(e)?;
    let equi = max_abs_diff(&pout, &out.index_select(&idx, 0).map_err(e)?);
    check!(equi <= 1e-6, "permutation equivariance error {equi:e}");

    let mut pb = ParamBuilder::new(5, DType::F64);
    let attn = AttentionParams::new(&mut pb, "attn", 16).map_err(e)?;
    let tokens = rng.normal_tensor(&[1, 5 * 64, 16], DType::F64).map_err(e)?.affine(3.0, 0.0).map_err(e)?;
    let w = attn.weights(&tokens).map_err(e)?;
    let row_err = values(&w.sum(2).map_err(e)?).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let min_w = values(&w).into_iter().fold(f64::INFINITY, f64::min);
    check!(row_err <= 1e-6 && min_w >= 0.0, "attention rows off by {row_err:e}, min weight {min_w}");

    let fvf = model.conditioner.condition(&x, 57, &poses, &cond.geometry, &model.rig, &Default::default()).map_err(e)?;
    let bump = Tensor::cat(
        &[
            x.narrow(0, 0, 2).map_err(e)?,
            (x.narrow(0, 2, 1).map_err(e)? + 0.5).map_err(e)?,
            x.narrow(0, 3, 1).map_err(e)?,
        ],
        0,
    )
    .map_err(e)?;
    let others = Tensor::new(&[0u32, 1, 3], &Device::Cpu).map_err(e)?;
    let mut leaks = Vec::new();
    for mode in [AttentionMode::Off, AttentionMode::PerView, AttentionMode::Joint] {
        model.set_attention(mode);
        let a = model.denoiser.predict_noise(&x, &cond.y, &fvf, 57, &poses, &cond.y_pose).map_err(e)?;
        let b = model.denoiser.predict_noise(&bump, &cond.y, &fvf, 57, &poses, &cond.y_pose).map_err(e)?;
        leaks.push(max_abs_diff(&a.index_select(&others, 0).map_err(e)?, &b.index_select(&others, 0).map_err(e)?));
    }
    check!(leaks[0] == 0.0 && leaks[1] == 0.0, "cross-view leakage without joint attention: off {:e}, per-view {:e}", leaks[0], leaks[1]);
    check!(leaks[2] > 1e-9, "joint attention shows no cross-view influence ({:e})", leaks[2]);
    Ok(format!("equivariance err {equi:.1e}, row-sum err {row_err:.1e}, leakage off/per-view/joint {:.0e}/{:.0e}/{:.1e}", leaks[0], leaks[1], leaks[2]))
}

fn criterion_4() -> Outcome {
    let cfg = ModelConfig::desk();
    let model = Gen3dModel::new(&cfg, 1, DType::F64).map_err(e)?;
    let rig = &model.rig;
    let grid = &rig.grid;
    let k: Intrinsics = rig.intrinsics;
    let (w, h) = (k.width, k.height);
    let ramp = |u: f64, v: f64, c: usize| 0.3 + (c as f64 + 1.0) * 0.17 * u - 0.05 * v * c as f64 + 0.02 * v;
    let mut data = Vec::with_capacity(2 * w * h);
    for c in 0..2 {
        for i in 0..h {
            for j in 0..w {
                data.push(ramp(j as f64, i as f64, c));
            }
        }
    }
    let features = Tensor::from_vec(data, (2, h, w), &Device::Cpu).map_err(e)?;
    let mut worst_bi = 0.0f64;
    let mut valid_total = 0;
    let verts = grid.vertices();
    for az in [-180.0, -95.0, 0.0, 40.0, 135.0] {
        let pose = cfg.pose(az).map_err(e)?;
        let (vol, valid) = sample_view_features(&features, &pose, &k, grid).map_err(e)?;
        let vol = values(&vol);
        let valid = values(&valid);
        for (n, p) in verts.iter().enumerate() {
            let proj = project(*p, &pose, &k);
            let inside = proj.in_frustum(&k);
            check!(inside == (valid[n] == 1.0), "validity mismatch at vertex {n}, azimuth {az}");
            for c in 0..2 {
                let want = if inside { ramp(proj.u, proj.v, c) } else { 0.0 };
                worst_bi = worst_bi.max((vol[n * 2 + c] - want).abs());
            }
            valid_total += inside as usize;
        }
    }
    check!(worst_bi <= 1e-6 && valid_total > 0, "bilinear ramp error {worst_bi:e} over {valid_total} valid points");

    let field = |p: [f64; 3], c: usize| 0.5 + 0.9 * p[0] - 0.4 * p[1] + (0.3 + c as f64) * p[2];
    let rows: Vec<f64> = verts.iter().flat_map(|p| (0..3).map(move |c| field(*p, c))).collect();
    let fag = HybridVolume(Tensor::from_vec(rows, (verts.len(), 3), &Device::Cpu).map_err(e)?);
    let poses: Vec<_> = [-120.0, 0.0, 75.0].iter().map(|&a| cfg.pose(a).unwrap()).collect();
    let (size, depth) = (cfg.frustum_size, cfg.depth_samples);
    let samples = sample_frustum(&fag, &poses, rig, size, depth).map_err(e)?;
    check!(samples.depths.iter().all(|&d| d >= rig.near && d <= rig.far), "depths {:?} outside [{}, {}]", samples.depths, rig.near, rig.far);
    check!(samples.depths.first() == Some(&rig.near) && samples.depths.last() == Some(&rig.far), "depth range endpoints");
    let feats = values(&samples.features);
    let valid = values(&samples.validity);
    let fk = k.rescaled(size, size);
    let mut worst_tri = 0.0f64;
    let mut worst_depth = 0.0f64;
    let mut inside_total = 0;
    let per_view = depth * size * size;
    for (v, pose) in poses.iter().enumerate() {
        let pts = frustum_points(pose, &fk, &samples.depths);
        for (n, p) in pts.iter().enumerate() {
            let row = v * per_view + n;
            check!(samples.points[row] == *p, "frustum point order mismatch");
            worst_depth = worst_depth.max((pose.world_to_camera(*p)[2] - samples.depths[n / (size * size)]).abs());
            let inside = p.iter().all(|x| x.abs() <= grid.extent + 1e-12);
            check!(inside == (valid[row] == 1.0), "frustum validity mismatch at row {row}");
            for c in 0..3 {
                let want = if inside { field(*p, c) } else { 0.0 };
                worst_tri = worst_tri.max((feats[row * 3 + c] - want).abs());
            }
            inside_total += inside as usize;
        }
    }
    check!(worst_tri <= 1e-6 && worst_depth <= 1e-9 && inside_total > 0, "trilinear error {worst_tri:e}, depth error {worst_depth:e}");
    Ok(format!("bilinear err {worst_bi:.1e} on {valid_total} points, trilinear err {worst_tri:.1e} on {inside_total} samples"))
}

fn basis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn criterion_5() -> Outcome {
    let (count, janus, swaps) = (50, 10, 15);
    let records = generate_corpus_with_defects(count, 2024, DataMix::Both, 16, janus, swaps).map_err(e)?;
    let mut clf = LookupClassifier::new(0.1);
    let mut emb = LookupEmbedder::new(Box::new(RandomConvEmbedder::new(1, 8)));
    let mut planted_views = BTreeSet::new();
    let mut planted_ids = BTreeSet::new();
    let mut boundary = BTreeSet::new();
    for r in &records {
        for v in &r.views {
            let impostor = v.planted == Some(Planted::Swap);
            emb.insert(&v.image, basis(2 * count, 2 * r.id as usize + impostor as usize));
            if impostor {
                planted_ids.insert(r.id);
            }
            if v.planted == Some(Planted::Janus) {
                clf.insert(&v.image, 0.99);
                planted_views.insert((r.id, v.azimuth.to_bits()));
            } else if !is_back_view(v.azimuth) {
                clf.insert(&v.image, 1.0);
            } else if v.azimuth == -180.0 {
                clf.insert(&v.image, DEFAULT_TAU_BV);
                boundary.insert((r.id, v.azimuth.to_bits()));
            }
        }
    }
    check!(planted_views.len() == janus && planted_ids.len() == swaps, "corpus planted {} janus / {} swaps", planted_views.len(), planted_ids.len());
    let (kept, report) = prune(records.clone(), &clf, &emb, DEFAULT_TAU_BV, DEFAULT_TAU_II).map_err(e)?;
    let removed: BTreeSet<_> = report.removed_views.iter().map(|r| (r.id, r.azimuth.to_bits())).collect();
    let hits = removed.intersection(&planted_views).count();
    let (p_bv, r_bv) = (hits as f64 / removed.len().max(1) as f64, hits as f64 / planted_views.len() as f64);
    let dropped: BTreeSet<u32> = records.iter().map(|r| r.id).filter(|id| !report.kept_identities.contains(id)).collect();
    let hits = dropped.intersection(&planted_ids).count();
    let (p_ii, r_ii) = (hits as f64 / dropped.len().max(1) as f64, hits as f64 / planted_ids.len() as f64);
    check!(p_bv == 1.0 && r_bv == 1.0, "janus filter precision {p_bv} recall {r_bv}");
    check!(p_ii == 1.0 && r_ii == 1.0, "consistency filter precision {p_ii} recall {r_ii}");
    check!(kept.len() == 35, "kept {} identities, expected ceil(0.7 * 50) = 35", kept.len());
    let survivors: BTreeSet<_> =
        kept.iter().flat_map(|r| r.views.iter().map(move |v| (r.id, v.azimuth.to_bits()))).collect();
    let kept_boundary = boundary.iter().filter(|b| survivors.contains(b)).count();
    let kept_ids: BTreeSet<u32> = kept.iter().map(|r| r.id).collect();
    let eligible = boundary.iter().filter(|b| kept_ids.contains(&b.0)).count();
    check!(kept_boundary == eligible && eligible > 0, "score == tau views: {kept_boundary} of {eligible} kept");

    let one = vec![records[0].clone()];
    let back = one[0].view_at(-90.0 - 15.0).unwrap().image.clone();
    let mut edge = LookupClassifier::new(0.0);
    edge.insert(&back, DEFAULT_TAU_BV + 1e-9);
    let (_, rep) = janus_filter(one.clone(), &edge, DEFAULT_TAU_BV).map_err(e)?;
    check!(rep.removed_views.len() == 1, "score just above tau was not removed");
    let mut ties = LookupEmbedder::new(Box::new(RandomConvEmbedder::new(1, 8)));
    let same: Vec<IdentityRecord> = records[..4].to_vec();
    for r in &same {
        for v in &r.views {
            ties.insert(&v.image, basis(4, 0));
        }
    }
    let (_, rep) = identity_consistency_filter(same, &ties, 0.5).map_err(e)?;
    let lowest: Vec<u32> = {
        let mut ids: Vec<u32> = records[..4].iter().map(|r| r.id).collect();
        ids.sort();
        ids.truncate(2);
        ids
    };
    check!(rep.kept_identities.iter().copied().collect::<BTreeSet<_>>() == lowest.iter().copied().collect(), "ties not broken toward lower ids");
    Ok(format!(
        "janus P/R {p_bv}/{r_bv} ({} views), consistency P/R {p_ii}/{r_ii} ({} ids), {kept_boundary} boundary views kept",
        planted_views.len(),
        planted_ids.len()
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = SeededRng::new(61);
    let feats: Vec<Vec<f64>> = (0..200).map(|_| rng.normals(6)).collect();
    let a = FeatureStats::from_features(&feats).map_err(e)?;
    let self_fid = fid(&a, &a).map_err(e)?;
    check!(self_fid.abs() <= 1e-8, "fid(a, a) = {self_fid:e}");
    let one = |m: f64| FeatureStats { mean: DVector::from_element(1, m), covariance: DMatrix::identity(1, 1), count: 2 };
    let f1 = fid(&one(0.0), &one(1.0)).map_err(e)?;
    check!(f1 == 1.0, "1-D closed form gave {f1}");

    let views: Vec<image::RgbImage> =
        (0..7).map(|i| image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 20 + i * 9) as u8, (i * 31) as u8]))).collect();
    let mut emb = LookupEmbedder::new(Box::new(RandomConvEmbedder::new(2, 8)));
    for v in &views {
        emb.insert(v, rng.normals(12));
    }
    let vecs: Vec<Vec<f64>> = views.iter().map(|v| emb.embed(v)).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..vecs.len() {
        for j in 0..vecs.len() {
            if i < j {
                total += vecs[i].iter().zip(&vecs[j]).map(|(x, y)| x * y).sum::<f64>();
                pairs += 1;
            }
        }
    }
    let brute = total / pairs as f64;
    let got = o2oid(&views, &emb).map_err(e)?;
    check!((got - brute).abs() <= 1e-12, "o2oid {got} vs brute force {brute}");

    check!(REID_THRESHOLD == 0.6, "re-id threshold {REID_THRESHOLD}");
    let reference = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
    let generated = vec![vec![0.5, 0.0], vec![0.0, 0.7]];
    let (matched, dist) = reid_from_embeddings(&generated, &reference, REID_THRESHOLD).map_err(e)?;
    check!(matched == 0.5 && (dist - 0.6).abs() < 1e-15, "reid returned ({matched}, {dist})");
    let (m_edge, _) = reid_from_embeddings(&[vec![0.6]], &[vec![0.0]], REID_THRESHOLD).map_err(e)?;
    check!(m_edge == 0.0, "distance equal to the threshold counted as a match");

    let img = image::RgbImage::from_fn(24, 20, |x, y| image::Rgb([(x * 7 + y) as u8, (y * 11) as u8, ((x * y) % 251) as u8]));
    let s = ssim(&img, &img).map_err(e)?;
    check!((s - 1.0).abs() <= 1e-9, "ssim(x, x) = {s}");
    Ok(format!("fid(a,a) {self_fid:.1e}, 1-D fid {f1}, o2oid err {:.1e}, reid ({matched}, {dist}), ssim {s}", (got - brute).abs()))
}

fn window(losses: &[f64], end: usize) -> f64 {
    let s = &losses[end.saturating_sub(50)..end];
    s.iter().sum::<f64>() / s.len() as f64
}

fn criterion_7() -> Outcome {
    let cfg = TrainConfig::desk();
    check!(
        cfg.views == 8 && cfg.subset == 4 && cfg.model.image_size == 32 && cfg.timesteps == 100 && cfg.steps <= 2000,
        "desk config drifted from N=8, k=4, 32px, T=100"
    );
    let records = toy_records(2, cfg.seed, cfg.model.image_size);
    let examples = build_examples(&records, &cfg).map_err(e)?;
    let dir = tempfile::tempdir().map_err(e)?;
    let out = fit(&cfg, &examples, &FitOptions { out_dir: Some(dir.path().into()), progress_every: 250, ..Default::default() }).map_err(e)?;
    let (first, last) = (window(&out.losses, 50), window(&out.losses, out.losses.len()));
    let ratio = last / first;

    let ck = Checkpoint::from_bytes(&out.checkpoint.to_bytes().map_err(e)?).map_err(e)?;
    let model = ck.model().map_err(e)?;
    let poses: Vec<_> = uniform_azimuths(cfg.views).iter().map(|&a| cfg.model.pose(a).unwrap()).collect();
    let ex: &TrainExample = &examples[0];
    let samples = sample_views(&model, &ex.cond, &cfg.model, &poses, &ck.schedule, cfg.ddim_steps, cfg.eta, &mut SeededRng::new(71))
        .map_err(e)?;
    let generated = tensor_to_images(&samples).map_err(e)?;
    let noise = SeededRng::new(72).normal_tensor(samples.dims(), DType::F32).map_err(e)?.clamp(-1.0, 1.0).map_err(e)?;
    let noise = tensor_to_images(&noise).map_err(e)?;
    let face = RandomConvEmbedder::new(7, 64);
    let (o_gen, o_noise) = (o2oid(&generated, &face).map_err(e)?, o2oid(&noise, &face).map_err(e)?);
    let detail = format!(
        "loss MA {first:.3} -> {last:.3} (ratio {ratio:.3}) over {} steps; O2OID samples {o_gen:.4} vs noise {o_noise:.4}",
        out.losses.len()
    );
    check!(ratio <= 0.5, "{detail}: loss did not halve");
    check!(o_gen > o_noise, "{detail}: samples not more consistent than noise");
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let s = TrainConfig::desk().lr_schedule();
    check!(s == LrSchedule::standard(), "desk LR schedule differs from the standard one");
    let bb = |step| lr_at(step, ParamGroup::Backbone, &s);
    let other = |step| lr_at(step, ParamGroup::Other, &s);
    check!(bb(0) == 1e-6, "backbone lr at 0 = {}", bb(0));
    for step in [100, 101, 500, 90_000] {
        check!(bb(step) == 5e-5, "backbone lr at {step} = {}", bb(step));
    }
    for step in [0, 1, 50, 99, 100, 90_000] {
        check!(other(step) == 5e-4, "other lr at {step} = {}", other(step));
    }
    check!((1..100).all(|t| bb(t) > bb(t - 1) && bb(t) < 5e-5), "backbone warm-up not monotone");
    check!(ParamGroup::of("backbone.conv_in.weight") == ParamGroup::Backbone && ParamGroup::of("inject.l0.proj.weight") == ParamGroup::Other, "param grouping");

    let (n, k, draws) = (16, 4, 100_000);
    let mut counts = vec![0usize; n];
    let mut rng = SeededRng::new(81);
    for _ in 0..draws {
        let sub = sample_view_subset(n, k, &mut rng).map_err(e)?;
        check!(sub.iter().collect::<BTreeSet<_>>().len() == k, "subset has duplicates");
        for v in sub {
            counts[v] += 1;
        }
    }
    let p = k as f64 / n as f64;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst = counts.iter().map(|&c| (c as f64 - expected).abs()).fold(0.0, f64::max);
    check!(worst <= 3.0 * sigma, "view frequency off by {worst} (3 sigma = {:.1}): {counts:?}", 3.0 * sigma);
    Ok(format!("lr endpoints exact; worst frequency deviation {worst:.0} vs 3 sigma {:.0}", 3.0 * sigma))
}

fn criterion_9() -> Outcome {
    let cfg = tiny_train("f32");
    let records = toy_records(3, 9, 8);
    let run = || -> Result<(Vec<u8>, Vec<u8>, String), String> {
        let examples = build_examples(&records, &cfg).map_err(e)?;
        let out = fit(&cfg, &examples, &FitOptions::default()).map_err(e)?;
        let bytes = out.checkpoint.to_bytes().map_err(e)?;
        let model = Checkpoint::from_bytes(&bytes).map_err(e)?.model().map_err(e)?;
        let poses: Vec<_> = uniform_azimuths(cfg.views).iter().map(|&a| cfg.model.pose(a).unwrap()).collect();
        let mut idents = Vec::new();
        let mut raw = Vec::new();
        for (ex, rec) in examples.iter().zip(&records) {
            let views = sample_views(&model, &ex.cond, &cfg.model, &poses, &out.checkpoint.schedule, 5, 0.5, &mut SeededRng::new(91))
                .map_err(e)?;
            raw.extend(values(&views).iter().flat_map(|v| v.to_le_bytes()));
            let reference = ex.azimuths.iter().map(|&a| rec.view_at(a).unwrap().image.clone()).collect();
            idents.push(EvalIdentity {
                id: ex.id,
                input: rec.view_at(0.0).unwrap().image.clone(),
                generated: tensor_to_images(&views).map_err(e)?,
                reference: Some(reference),
            });
        }
        let report = evaluate(&idents, &MetricBackends::desk()).map_err(e)?;
        Ok((bytes, raw, serde_json::to_string(&report).map_err(e)?))
    };
    let (a, b) = (run()?, run()?);
    check!(a.0 == b.0, "checkpoints differ");
    check!(a.1 == b.1, "samples differ");
    check!(a.2 == b.2, "metric reports differ");
    Ok(format!("checkpoint {} bytes, samples {} bytes, report {} bytes identical across runs", a.0.len(), a.1.len(), a.2.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("1 schedule and diffusion oracles", criterion_1, Duration::from_secs(10)),
        ("2 loss values and gradient check", criterion_2, Duration::from_secs(120)),
        ("3 joint-view equivariance", criterion_3, Duration::from_secs(30)),
        ("4 conditioning geometry oracles", criterion_4, Duration::from_secs(30)),
        ("5 pruning precision and recall", criterion_5, Duration::from_secs(30)),
        ("6 metric suite", criterion_6, Duration::from_secs(30)),
        ("7 training smoke", criterion_7, Duration::from_secs(90 * 60)),
        ("8 schedule constants", criterion_8, Duration::from_secs(60)),
        ("9 reproducibility", criterion_9, Duration::from_secs(300)),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if only.as_deref().is_some_and(|o| !name.starts_with(o)) {
            continue;
        }
        let clock = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let elapsed = clock.elapsed();
        let result = match result {
            Ok(d) if elapsed > budget => Err(format!("{d}; over the {}s budget", budget.as_secs())),
            r => r,
        };
        match result {
            Ok(d) => println!("PASS  criterion {name}: {d} [{:.1}s]", elapsed.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("FAIL  criterion {name}: {d} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
