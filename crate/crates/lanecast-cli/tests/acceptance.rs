//! End-to-end acceptance suite: directional model comparisons on a shared
//! synthetic dataset, plus exhaustive property checks for the numerical and
//! geometric building blocks. Criteria that need trained models share one
//! lazily trained fixture.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lanecast::data::generate::{generate, GeneratorConfig};
use lanecast::data::assign_split;
use lanecast::dataset::{build_samples, DatasetConfig, ModelSample};
use lanecast::geometry::{rotate_about, Point2};
use lanecast::kalman::{self, KalmanConfig};
use lanecast::lane::{
    build_lane_input, extend_lane, filter_by_direction, select_three_lanes, LaneChunk,
    DIRECTION_FILTER_DEG, EXTENSION_SEARCH_RADIUS_M, LANE_POINTS, LANE_SPACING_M,
    SIDE_LANE_MIN_OFFSET_M,
};
use lanecast::metrics::{ade, fde, HorizonReport};
use lanecast::model::{
    blended_loss, evaluate, MapMode, Model, ModelConfig, RegressionMode,
};
use lanecast::nn::{
    causal_mask, DecoderLayer, EncoderLayer, LayerNorm, Linear, Mlp, MultiHeadAttention,
    Parameterized,
};
use lanecast::scene::{Scene, Split};
use lanecast::tensor::{scaled_dot_product_attention, Optimizer, Tensor};

// ===========================================================================
// Shared trained fixture
// ===========================================================================

const FIXTURE_SEED: u64 = 7;
const FIXTURE_SCENES: usize = 500;
const EPOCHS: usize = 100;
const BATCH: usize = 32;
const LR: f64 = 5e-4;
const DECAY: f64 = 0.9999;

fn small_config(map_mode: MapMode, regression_mode: RegressionMode) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 64,
        map_fc_dim: 32,
        map_mode,
        regression_mode,
        seed: FIXTURE_SEED,
        ..ModelConfig::default()
    }
}

struct Trained {
    /// (variant name, test-set report), fixed order:
    /// lane-ar, lane-nar, none-ar, occupancy-ar.
    reports: Vec<(&'static str, HorizonReport)>,
}

fn fixture_scenes() -> Vec<Scene> {
    let mut scenes = generate(&GeneratorConfig {
        seed: FIXTURE_SEED,
        n_scenes: FIXTURE_SCENES,
        ..GeneratorConfig::default()
    });
    assign_split(&mut scenes, FIXTURE_SEED).unwrap();
    scenes
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let scenes = fixture_scenes();
        let (samples, _) = build_samples(&scenes, &DatasetConfig::default());
        let by_split = |s: Split| -> Vec<ModelSample> {
            samples
                .iter()
                .filter(|x| x.split == Some(s))
                .cloned()
                .collect()
        };
        let train = by_split(Split::Train);
        let test = by_split(Split::Test);
        assert!(train.len() >= 500 && test.len() >= 50);

        let variants = [
            ("lane-ar", MapMode::Lane, RegressionMode::Ar),
            ("lane-nar", MapMode::Lane, RegressionMode::Nar),
            ("none-ar", MapMode::None, RegressionMode::Ar),
            ("occupancy-ar", MapMode::Occupancy, RegressionMode::Ar),
        ];
        let reports = variants
            .map(|(name, map, reg)| {
                let model = Model::new(small_config(map, reg)).unwrap();
                let mut opt = Optimizer::new(LR, DECAY);
                for epoch in 0..EPOCHS {
                    let seed = FIXTURE_SEED.wrapping_add(epoch as u64);
                    let loss = model.train_epoch(&train, &mut opt, BATCH, seed).unwrap();
                    assert!(loss.total.is_finite(), "{name} diverged at epoch {epoch}");
                }
                (name, evaluate(&model, &test).unwrap())
            })
            .to_vec();
        Trained { reports }
    })
}

fn report(name: &str) -> &'static HorizonReport {
    &trained()
        .reports
        .iter()
        .find(|(n, _)| *n == name)
        .unwrap()
        .1
}

// ===========================================================================
// Criterion 1: fed-back decoding beats teacher-forced decoding
// ===========================================================================

#[test]
fn c01_fed_back_training_beats_teacher_forcing_at_6s() {
    let ar = report("lane-ar");
    let nar = report("lane-nar");
    let (a_ade, a_fde) = (ar.ade_at(6), ar.fde_at(6));
    let (n_ade, n_fde) = (nar.ade_at(6), nar.fde_at(6));
    println!(
        "criterion 1 | ADE@6s ar {a_ade:.3} vs nar {n_ade:.3}; FDE@6s ar {a_fde:.3} vs nar {n_fde:.3}"
    );
    assert!(
        a_ade < 0.95 * n_ade,
        "ADE@6s: ar {a_ade:.3} not >=5% below nar {n_ade:.3}"
    );
    assert!(
        a_fde < 0.95 * n_fde,
        "FDE@6s: ar {a_fde:.3} not >=5% below nar {n_fde:.3}"
    );
}

// ===========================================================================
// Criterion 2: map ablation ordering at 6 s
// ===========================================================================

#[test]
fn c02_lane_map_beats_no_map_with_occupancy_between() {
    let lane = report("lane-ar").fde_at(6);
    let occ = report("occupancy-ar").fde_at(6);
    let none = report("none-ar").fde_at(6);
    println!("criterion 2 | FDE@6s lane {lane:.3} / occupancy {occ:.3} / no-map {none:.3}");
    assert!(
        lane < 0.95 * none,
        "FDE@6s: lane {lane:.3} not >=5% below no-map {none:.3}"
    );
    let between = lane <= occ && occ <= none;
    let near_lane = (occ - lane).abs() <= 0.05 * lane;
    let near_none = (occ - none).abs() <= 0.05 * none;
    assert!(
        between || near_lane || near_none,
        "FDE@6s: occupancy {occ:.3} neither between lane {lane:.3} and no-map {none:.3} nor within 5% of either"
    );
}

// ===========================================================================
// Criterion 3: errors grow with the horizon
// ===========================================================================

#[test]
fn c03_errors_are_non_decreasing_in_horizon() {
    for (name, rep) in &trained().reports {
        for h in 1..6 {
            let (a0, a1) = (rep.ade_at(h), rep.ade_at(h + 1));
            let (f0, f1) = (rep.fde_at(h), rep.fde_at(h + 1));
            assert!(a1 >= a0, "{name}: ADE {a1:.4} at {}s below {a0:.4} at {h}s", h + 1);
            assert!(f1 >= f0, "{name}: FDE {f1:.4} at {}s below {f0:.4} at {h}s", h + 1);
        }
    }
    println!("criterion 3 | ADE/FDE non-decreasing over 1s..6s for all 4 variants");
}

// ===========================================================================
// Criterion 4: gradients match central finite differences
// ===========================================================================

/// Checks d(loss)/d(param) for every parameter entry against a central
/// finite difference. `loss` must rebuild the graph from current data.
fn gradcheck(label: &str, params: &[Tensor], loss: &dyn Fn() -> Tensor) {
    for p in params {
        let _ = p.take_grad(); // drop any accumulation from earlier graphs
    }
    let l = loss();
    l.backward().unwrap();
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.take_grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    const EPS: f64 = 1e-5;
    for (p, g) in params.iter().zip(&grads) {
        let base = p.data();
        for j in 0..base.len() {
            let mut v = base.clone();
            v[j] = base[j] + EPS;
            p.set_data(&v);
            let up = loss().scalar_value();
            v[j] = base[j] - EPS;
            p.set_data(&v);
            let down = loss().scalar_value();
            p.set_data(&base);
            let fd = (up - down) / (2.0 * EPS);
            let ad = g[j];
            let tol = 1e-5 * fd.abs().max(ad.abs()).max(1.0);
            assert!(
                (fd - ad).abs() <= tol,
                "{label}[{j}]: fd {fd:.6e} vs ad {ad:.6e}"
            );
        }
    }
}

fn rand_param(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let vals = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::parameter(shape, vals)
}

/// Random values bounded away from zero, so relu kinks stay out of reach of
/// the finite-difference step.
fn rand_param_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let vals = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.2..1.5)
        })
        .collect();
    Tensor::parameter(shape, vals)
}

/// Projects any tensor to a scalar with fixed random weights, so gradients
/// flow through every output element.
fn project(rng: &mut ChaCha8Rng, t: &Tensor) -> Tensor {
    let n = t.numel();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let flat = t.reshape(vec![n]);
    flat.elementwise_mul(&Tensor::constant(vec![n], w))
        .unwrap()
        .sum_all()
}

#[test]
fn c04_every_op_and_block_passes_gradient_checks() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Elementary operations.
        let a = rand_param(&mut rng, vec![3, 4], -1.5, 1.5);
        let b = rand_param(&mut rng, vec![3, 4], -1.5, 1.5);
        let m = rand_param(&mut rng, vec![4, 5], -1.0, 1.0);
        let pos = rand_param(&mut rng, vec![3, 4], 0.3, 2.0);
        let off = rand_param_off_zero(&mut rng, vec![3, 4]);
        // Each closure rebuilds its graph from the leaves on every call.
        let mut prng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 1);
        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn() -> Tensor>)> = {
            let mk = |r: &mut ChaCha8Rng| ChaCha8Rng::seed_from_u64(r.gen());
            let mut c: Vec<(&str, Vec<Tensor>, Box<dyn Fn() -> Tensor>)> = Vec::new();
            let (a1, b1) = (a.clone(), b.clone());
            let g = mk(&mut prng);
            c.push((
                "add",
                vec![a.clone(), b.clone()],
                Box::new(move || project(&mut g.clone(), &a1.add(&b1).unwrap())),
            ));
            let (a2, b2) = (a.clone(), b.clone());
            let g = mk(&mut prng);
            c.push((
                "sub",
                vec![a.clone(), b.clone()],
                Box::new(move || project(&mut g.clone(), &a2.sub(&b2).unwrap())),
            ));
            let (a3, b3) = (a.clone(), b.clone());
            let g = mk(&mut prng);
            c.push((
                "elementwise_mul",
                vec![a.clone(), b.clone()],
                Box::new(move || project(&mut g.clone(), &a3.elementwise_mul(&b3).unwrap())),
            ));
            let (a4, m4) = (a.clone(), m.clone());
            let g = mk(&mut prng);
            c.push((
                "matmul",
                vec![a.clone(), m.clone()],
                Box::new(move || project(&mut g.clone(), &a4.matmul(&m4).unwrap())),
            ));
            let a5 = a.clone();
            let g = mk(&mut prng);
            c.push((
                "scale",
                vec![a.clone()],
                Box::new(move || project(&mut g.clone(), &a5.scale(-1.7))),
            ));
            let o6 = off.clone();
            let g = mk(&mut prng);
            c.push((
                "relu",
                vec![off.clone()],
                Box::new(move || project(&mut g.clone(), &o6.relu())),
            ));
            let p7 = pos.clone();
            let g = mk(&mut prng);
            c.push((
                "ln",
                vec![pos.clone()],
                Box::new(move || project(&mut g.clone(), &p7.ln())),
            ));
            let a8 = a.clone();
            let g = mk(&mut prng);
            c.push((
                "softmax",
                vec![a.clone()],
                Box::new(move || project(&mut g.clone(), &a8.softmax())),
            ));
            let a9 = a.clone();
            c.push((
                "sum_all",
                vec![a.clone()],
                Box::new(move || a9.sum_all()),
            ));
            let a10 = a.clone();
            c.push((
                "mean_all",
                vec![a.clone()],
                Box::new(move || a10.mean_all()),
            ));
            let a11 = a.clone();
            c.push(("pick", vec![a.clone()], Box::new(move || a11.pick(5))));
            let a12 = a.clone();
            let g = mk(&mut prng);
            c.push((
                "row",
                vec![a.clone()],
                Box::new(move || project(&mut g.clone(), &a12.row(1))),
            ));
            let a13 = a.clone();
            let g = mk(&mut prng);
            c.push((
                "cols",
                vec![a.clone()],
                Box::new(move || project(&mut g.clone(), &a13.cols(1, 2))),
            ));
            let a14 = a.clone();
            let g = mk(&mut prng);
            c.push((
                "transpose",
                vec![a.clone()],
                Box::new(move || project(&mut g.clone(), &a14.transpose())),
            ));
            let a15 = a.clone();
            let g = mk(&mut prng);
            c.push((
                "reshape",
                vec![a.clone()],
                Box::new(move || project(&mut g.clone(), &a15.reshape(vec![2, 6]))),
            ));
            let (a16, b16) = (a.clone(), b.clone());
            let g = mk(&mut prng);
            c.push((
                "concat_axis0",
                vec![a.clone(), b.clone()],
                Box::new(move || {
                    project(
                        &mut g.clone(),
                        &Tensor::concat(&[a16.clone(), b16.clone()], 0).unwrap(),
                    )
                }),
            ));
            let (a17, b17) = (a.clone(), b.clone());
            let g = mk(&mut prng);
            c.push((
                "concat_axis1",
                vec![a.clone(), b.clone()],
                Box::new(move || {
                    project(
                        &mut g.clone(),
                        &Tensor::concat(&[a17.clone(), b17.clone()], 1).unwrap(),
                    )
                }),
            ));
            let rows: Vec<Tensor> = (0..3)
                .map(|_| rand_param(&mut prng, vec![4], -1.0, 1.0))
                .collect();
            let rows2 = rows.clone();
            let g = mk(&mut prng);
            c.push((
                "stack_rows",
                rows.clone(),
                Box::new(move || {
                    project(&mut g.clone(), &Tensor::stack_rows(&rows2).unwrap())
                }),
            ));
            let gamma = rand_param(&mut prng, vec![4], 0.5, 1.5);
            let beta = rand_param(&mut prng, vec![4], -0.5, 0.5);
            let (a18, g18, b18) = (a.clone(), gamma.clone(), beta.clone());
            let g = mk(&mut prng);
            c.push((
                "layer_norm",
                vec![a.clone(), gamma, beta],
                Box::new(move || {
                    project(
                        &mut g.clone(),
                        &a18.layer_norm(&g18, &b18, 1e-5).unwrap(),
                    )
                }),
            ));
            let sig = rand_param(&mut prng, vec![2, 9], -1.0, 1.0);
            let k1 = rand_param(&mut prng, vec![3, 2, 3], -0.8, 0.8);
            let (s19, k19) = (sig.clone(), k1.clone());
            let g = mk(&mut prng);
            c.push((
                "conv1d",
                vec![sig, k1],
                Box::new(move || project(&mut g.clone(), &s19.conv1d(&k19, 2).unwrap())),
            ));
            let img = rand_param(&mut prng, vec![2, 7, 7], -1.0, 1.0);
            let k2 = rand_param(&mut prng, vec![3, 2, 3, 3], -0.8, 0.8);
            let (i20, k20) = (img.clone(), k2.clone());
            let g = mk(&mut prng);
            c.push((
                "conv2d",
                vec![img, k2],
                Box::new(move || project(&mut g.clone(), &i20.conv2d(&k20, 2).unwrap())),
            ));
            let q = rand_param(&mut prng, vec![3, 4], -1.0, 1.0);
            let k = rand_param(&mut prng, vec![5, 4], -1.0, 1.0);
            let v = rand_param(&mut prng, vec![5, 4], -1.0, 1.0);
            let (q21, k21, v21) = (q.clone(), k.clone(), v.clone());
            let g = mk(&mut prng);
            c.push((
                "attention",
                vec![q, k, v],
                Box::new(move || {
                    project(
                        &mut g.clone(),
                        &scaled_dot_product_attention(&q21, &k21, &v21, None).unwrap(),
                    )
                }),
            ));
            c
        };
        for (label, params, loss) in &cases {
            gradcheck(&format!("seed{seed}:{label}"), params, loss);
        }

        // Assembled blocks, exercised through their real forward paths.
        let mut brng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(101) + 3);
        let x = rand_param(&mut brng, vec![3, 8], -1.0, 1.0);

        let lin = Linear::new(&mut brng, 8, 4);
        let mut ps = Vec::new();
        lin.collect_params("lin", &mut ps);
        let params: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let (x1, g) = (x.clone(), ChaCha8Rng::seed_from_u64(seed + 500));
        gradcheck(&format!("seed{seed}:linear"), &params, &move || {
            project(&mut g.clone(), &lin.forward(&x1).unwrap())
        });

        let mlp = Mlp::new(&mut brng, &[8, 6, 2]);
        let mut ps = Vec::new();
        mlp.collect_params("mlp", &mut ps);
        let params: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let (x2, g) = (x.clone(), ChaCha8Rng::seed_from_u64(seed + 501));
        gradcheck(&format!("seed{seed}:mlp"), &params, &move || {
            project(&mut g.clone(), &mlp.forward(&x2).unwrap())
        });

        let norm = LayerNorm::new(8);
        let mut ps = Vec::new();
        norm.collect_params("norm", &mut ps);
        let mut params: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        params.push(x.clone());
        let (x3, g) = (x.clone(), ChaCha8Rng::seed_from_u64(seed + 502));
        gradcheck(&format!("seed{seed}:layer_norm_block"), &params, &move || {
            project(&mut g.clone(), &norm.forward(&x3).unwrap())
        });

        let att = MultiHeadAttention::new(&mut brng, 8, 2);
        let mut ps = Vec::new();
        att.collect_params("att", &mut ps);
        let params: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let (x4, g) = (x.clone(), ChaCha8Rng::seed_from_u64(seed + 503));
        let mask = causal_mask(3);
        gradcheck(&format!("seed{seed}:attention_block"), &params, &move || {
            project(
                &mut g.clone(),
                &att.forward(&x4, &x4, Some(&mask)).unwrap(),
            )
        });

        let enc = EncoderLayer::new(&mut brng, 8, 2, 16);
        let mut ps = Vec::new();
        enc.collect_params("enc", &mut ps);
        let params: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let (x5, g) = (x.clone(), ChaCha8Rng::seed_from_u64(seed + 504));
        gradcheck(&format!("seed{seed}:encoder_layer"), &params, &move || {
            project(&mut g.clone(), &enc.forward(&x5).unwrap())
        });

        let dec = DecoderLayer::new(&mut brng, 8, 2, 16);
        let mem = rand_param(&mut brng, vec![2, 8], -1.0, 1.0);
        let mut ps = Vec::new();
        dec.collect_params("dec", &mut ps);
        let params: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let (x6, m6, g) = (x.clone(), mem, ChaCha8Rng::seed_from_u64(seed + 505));
        let mask = causal_mask(3);
        gradcheck(&format!("seed{seed}:decoder_layer"), &params, &move || {
            project(&mut g.clone(), &dec.forward(&x6, &m6, &mask).unwrap())
        });
    }
    println!("criterion 4 | all ops and blocks pass finite-difference checks on 20 seeds");
}

// ===========================================================================
// Criterion 5: lane processing equals a brute-force geometric oracle
// ===========================================================================

/// Exhaustive, from-scratch restatement of three-lane selection: scalar math
/// only, scanning every point of every chunk.
fn oracle_select(
    pos: (f64, f64),
    chunks: &[LaneChunk],
) -> (u64, Option<u64>, Option<u64>) {
    let nearest: Vec<(usize, f64)> = chunks
        .iter()
        .map(|c| {
            let mut best = (0usize, f64::INFINITY);
            for (i, p) in c.centers.iter().enumerate() {
                let d = ((p.x - pos.0).powi(2) + (p.y - pos.1).powi(2)).sqrt();
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        })
        .collect();
    let mut mid = 0usize;
    for i in 1..chunks.len() {
        if nearest[i].1 < nearest[mid].1
            || (nearest[i].1 == nearest[mid].1 && chunks[i].chunk_id < chunks[mid].chunk_id)
        {
            mid = i;
        }
    }
    let anchor = chunks[mid].centers[nearest[mid].0];
    let j = nearest[mid].0.max(1);
    let (ax, ay) = (
        chunks[mid].centers[j].x - chunks[mid].centers[j - 1].x,
        chunks[mid].centers[j].y - chunks[mid].centers[j - 1].y,
    );
    let axis_norm = (ax * ax + ay * ay).sqrt();

    let mut best_left: Option<(f64, f64, u64, usize)> = None; // (|s|, near-dist, id, idx)
    let mut best_right: Option<(f64, f64, u64, usize)> = None;
    for i in 0..chunks.len() {
        if i == mid {
            continue;
        }
        let la = chunks[i].centers[nearest[i].0];
        let s = (ax * (la.y - anchor.y) - ay * (la.x - anchor.x)) / axis_norm;
        if s.abs() < SIDE_LANE_MIN_OFFSET_M {
            continue;
        }
        let cand = (s.abs(), nearest[i].1, chunks[i].chunk_id, i);
        let slot = if s >= 0.0 { &mut best_left } else { &mut best_right };
        let take = match slot {
            None => true,
            Some(cur) => {
                cand.0 < cur.0 - 1e-6
                    || (cand.0 <= cur.0 + 1e-6 && (cand.1, cand.2) < (cur.1, cur.2))
            }
        };
        if take {
            *slot = Some(cand);
        }
    }
    (
        chunks[mid].chunk_id,
        best_left.map(|c| c.2),
        best_right.map(|c| c.2),
    )
}

/// From-scratch lane extension: arc-length walk over chunk centers with an
/// exhaustive candidate scan at every chunk boundary.
fn oracle_extend(
    start_id: u64,
    start_index: usize,
    chunks: &[LaneChunk],
) -> Option<Vec<(f64, f64)>> {
    let start = chunks.iter().find(|c| c.chunk_id == start_id).unwrap();
    let mut pts: Vec<(f64, f64)> = start.centers[start_index..]
        .iter()
        .map(|p| (p.x, p.y))
        .collect();
    pts.truncate(LANE_POINTS);
    let mut used = vec![start_id];
    let mut tail = start;
    while pts.len() < LANE_POINTS {
        let n = tail.centers.len();
        let (ux, uy) = (
            tail.centers[n - 1].x - tail.centers[n - 2].x,
            tail.centers[n - 1].y - tail.centers[n - 2].y,
        );
        let norm = (ux * ux + uy * uy).sqrt();
        let (ux, uy) = (ux / norm, uy / norm);
        let v = (
            tail.centers[n - 1].x + LANE_SPACING_M * ux,
            tail.centers[n - 1].y + LANE_SPACING_M * uy,
        );
        let mut cands: Vec<(f64, u64)> = chunks
            .iter()
            .filter(|c| !used.contains(&c.chunk_id))
            .filter_map(|c| {
                let d = c
                    .centers
                    .iter()
                    .map(|p| ((p.x - v.0).powi(2) + (p.y - v.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                (d <= EXTENSION_SEARCH_RADIUS_M).then_some((d, c.chunk_id))
            })
            .collect();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut next = None;
        for (_, id) in cands {
            let c = chunks.iter().find(|c| c.chunk_id == id).unwrap();
            let rear = c
                .centers
                .iter()
                .filter(|p| (p.x - v.0) * ux + (p.y - v.1) * uy < 0.0)
                .count();
            if rear <= 2 {
                next = Some(c);
                break;
            }
        }
        let c = next?;
        used.push(c.chunk_id);
        for p in &c.centers {
            pts.push((p.x, p.y));
            if pts.len() == LANE_POINTS {
                break;
            }
        }
        tail = c;
    }
    Some(pts)
}

#[test]
fn c05_lane_processing_matches_brute_force_oracle() {
    let start = std::time::Instant::now();
    let scenes = fixture_scenes();
    let mut instances = 0;
    for scene in &scenes {
        for agent in &scene.agents {
            let heading = match agent.current_heading() {
                Ok(h) => h.normalized().unwrap(),
                Err(_) => continue,
            };
            let pos = agent.current_position();
            let kept = filter_by_direction(&heading, &pos, &scene.lane_chunks);
            if kept.is_empty() {
                continue;
            }
            // Independent re-check of the direction filter.
            for c in &kept {
                let (j, _) = c.nearest_center(&pos);
                let jj = j.max(1);
                let (dx, dy) = (
                    c.centers[jj].x - c.centers[jj - 1].x,
                    c.centers[jj].y - c.centers[jj - 1].y,
                );
                let dot = heading.dx * dx + heading.dy * dy;
                let ang = (dot / (dx * dx + dy * dy).sqrt()).clamp(-1.0, 1.0).acos();
                assert!(ang.to_degrees() <= DIRECTION_FILTER_DEG + 2e-9);
            }

            let sel = select_three_lanes(&pos, &kept).unwrap();
            let (omid, oleft, oright) = oracle_select((pos.x, pos.y), &kept);
            assert_eq!(kept[sel.middle.0].chunk_id, omid, "middle lane differs");
            assert_eq!(sel.left.map(|(i, _)| kept[i].chunk_id), oleft);
            assert_eq!(sel.right.map(|(i, _)| kept[i].chunk_id), oright);

            let slots = [Some(sel.middle), sel.left, sel.right];
            for slot in slots.into_iter().flatten() {
                let (ci, pi) = slot;
                let got = extend_lane(&kept[ci], pi, &scene.lane_chunks);
                let want = oracle_extend(kept[ci].chunk_id, pi, &scene.lane_chunks);
                match (got, want) {
                    (Ok(pts), Some(opts)) => {
                        assert_eq!(pts.len(), opts.len());
                        for (p, o) in pts.iter().zip(&opts) {
                            assert!(
                                (p.x - o.0).abs() <= 1e-9 && (p.y - o.1).abs() <= 1e-9,
                                "extension point differs: ({}, {}) vs {:?}",
                                p.x,
                                p.y,
                                o
                            );
                        }
                    }
                    (Err(_), None) => {}
                    (g, w) => panic!(
                        "extension disagreement on chunk {}: impl ok={} oracle ok={}",
                        kept[ci].chunk_id,
                        g.is_ok(),
                        w.is_some()
                    ),
                }
            }
            instances += 1;
        }
    }
    assert!(instances >= 1000, "only {instances} oracle instances");
    println!(
        "criterion 5 | {instances} instances match the oracle exactly in {:.1?}",
        start.elapsed()
    );
}

// ===========================================================================
// Criterion 6: mask soundness of the lane classifier
// ===========================================================================

#[test]
fn c06_masked_lane_probabilities_are_sound() {
    let model = Model::new(ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 32,
        ..ModelConfig::default()
    })
    .unwrap();
    let masks = [
        [true, true, true],
        [true, true, false],
        [false, true, true],
        [false, true, false],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let fused = Tensor::constant(
            vec![16],
            (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        );
        for mask in masks {
            let (probs, selected) = model.classify(&fused, mask).unwrap();
            let mut unmasked_sum = 0.0;
            for i in 0..3 {
                if mask[i] {
                    unmasked_sum += probs[i];
                } else {
                    assert_eq!(probs[i], 0.0, "masked probability not exactly zero");
                }
            }
            assert!(
                (unmasked_sum - 1.0).abs() <= 1e-12,
                "unmasked probabilities sum to {unmasked_sum}"
            );
            assert!(mask[selected], "selected slot {selected} is masked");
        }
    }
    println!("criterion 6 | 10000 features x 4 masks: zero masked mass, sum 1 +- 1e-12");
}

// ===========================================================================
// Criterion 7: the loss is exactly the stated blend
// ===========================================================================

#[test]
fn c07_loss_is_exactly_the_alpha_blend() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in 0..1000 {
        let n = rng.gen_range(1..=12);
        let pred: Vec<Point2> = (0..n)
            .map(|_| Point2::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0)))
            .collect();
        let gt: Vec<Point2> = (0..n)
            .map(|_| Point2::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0)))
            .collect();
        let logits = [
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-4.0..4.0),
            rng.gen_range(-4.0..4.0),
        ];
        let mask = [rng.gen_bool(0.5), true, rng.gen_bool(0.5)];
        let unmasked: Vec<usize> = (0..3).filter(|&i| mask[i]).collect();
        let gt_lane = unmasked[rng.gen_range(0..unmasked.len())];
        let alpha = match i % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        };
        let parts = blended_loss(&pred, &gt, logits, mask, gt_lane, alpha).unwrap();
        let recomposed = alpha * parts.mse + (1.0 - alpha) * parts.ce;
        assert!(
            (parts.total - recomposed).abs() <= 1e-12,
            "total {} vs recomposed {}",
            parts.total,
            recomposed
        );
        if alpha == 0.0 {
            assert_eq!(parts.total, parts.ce, "alpha=0 must collapse to ce");
        }
        if alpha == 1.0 {
            assert_eq!(parts.total, parts.mse, "alpha=1 must collapse to mse");
        }
        assert!(parts.ce >= 0.0);
    }
    println!("criterion 7 | 1000 random triples: total == alpha*mse + (1-alpha)*ce");
}

// ===========================================================================
// Criterion 8: rigid-motion equivariance of the pipeline stages
// ===========================================================================

fn transform_point(p: &Point2, theta_deg: f64, t: (f64, f64)) -> Point2 {
    let r = rotate_about(p, &Point2::new(0.0, 0.0), theta_deg);
    Point2::new(r.x + t.0, r.y + t.1)
}

fn transform_scene(scene: &Scene, theta_deg: f64, t: (f64, f64)) -> Scene {
    let mut out = scene.clone();
    for chunk in &mut out.lane_chunks {
        for p in &mut chunk.centers {
            *p = transform_point(p, theta_deg, t);
        }
    }
    for agent in &mut out.agents {
        agent.history = agent.history.map_positions(|p| transform_point(p, theta_deg, t));
        agent.future = agent.future.map_positions(|p| transform_point(p, theta_deg, t));
    }
    out.occupancy = None;
    out
}

#[test]
fn c08_pipeline_is_equivariant_under_rigid_motion() {
    let scenes = generate(&GeneratorConfig {
        seed: 3,
        n_scenes: 8,
        ..GeneratorConfig::default()
    });
    let cases = [(37.0, (120.0, -45.0)), (203.5, (-310.0, 77.0)), (330.0, (5.0, 900.0))];
    let kcfg = KalmanConfig::default();
    let model = Model::new(ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 32,
        map_mode: MapMode::Lane,
        ..ModelConfig::default()
    })
    .unwrap();
    let dcfg = DatasetConfig {
        with_raster: false,
        ..DatasetConfig::default()
    };

    for (theta, t) in cases {
        for scene in &scenes {
            let moved = transform_scene(scene, theta, t);

            // Smoothing commutes with the rigid motion.
            for agent in &scene.agents {
                let smoothed_then_moved = kalman::smooth(&agent.history, &kcfg)
                    .map_positions(|p| transform_point(p, theta, t));
                let moved_traj =
                    agent.history.map_positions(|p| transform_point(p, theta, t));
                let moved_then_smoothed = kalman::smooth(&moved_traj, &kcfg);
                for (a, b) in smoothed_then_moved
                    .positions()
                    .zip(moved_then_smoothed.positions())
                {
                    assert!(a.distance(&b) <= 1e-6, "smoothing not equivariant");
                }
            }

            // Agent-frame lane inputs are invariant.
            for (a, b) in scene.agents.iter().zip(&moved.agents) {
                let la = build_lane_input(a, &scene.lane_chunks);
                let lb = build_lane_input(b, &moved.lane_chunks);
                match (la, lb) {
                    (Ok(la), Ok(lb)) => {
                        assert_eq!(la.mask, lb.mask);
                        for (pa, pb) in la
                            .lanes
                            .iter()
                            .flatten()
                            .zip(lb.lanes.iter().flatten())
                        {
                            assert!(pa.distance(pb) <= 1e-6, "lane input not invariant");
                        }
                    }
                    (Err(ea), Err(eb)) => assert_eq!(ea, eb),
                    _ => panic!("lane input filter decision changed under rigid motion"),
                }
            }

            // Predictions move with the scene.
            let (sa, _) = build_samples(std::slice::from_ref(scene), &dcfg);
            let (sb, _) = build_samples(std::slice::from_ref(&moved), &dcfg);
            assert_eq!(sa.len(), sb.len());
            for (a, b) in sa.iter().zip(&sb) {
                let pa = model.predict(a).unwrap();
                let pb = model.predict(b).unwrap();
                assert_eq!(pa.selected, pb.selected);
                for (x, y) in pa.lane_probs.iter().zip(&pb.lane_probs) {
                    assert!((x - y).abs() <= 1e-6);
                }
                for (p, q) in pa.selected_global.iter().zip(&pb.selected_global) {
                    let moved_p = transform_point(p, theta, t);
                    assert!(
                        moved_p.distance(q) <= 1e-6,
                        "prediction not equivariant: {moved_p:?} vs {q:?}"
                    );
                }
            }

            // Metrics are invariant.
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let pred: Vec<Point2> = (0..12)
                .map(|_| Point2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)))
                .collect();
            let gt: Vec<Point2> = (0..12)
                .map(|_| Point2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)))
                .collect();
            let mp: Vec<Point2> = pred.iter().map(|p| transform_point(p, theta, t)).collect();
            let mg: Vec<Point2> = gt.iter().map(|p| transform_point(p, theta, t)).collect();
            for h in 1..=6 {
                assert!(
                    (ade(&pred, &gt, 2 * h).unwrap() - ade(&mp, &mg, 2 * h).unwrap()).abs()
                        <= 1e-6
                );
                assert!(
                    (fde(&pred, &gt, 2 * h).unwrap() - fde(&mp, &mg, 2 * h).unwrap()).abs()
                        <= 1e-6
                );
            }
        }
    }
    println!("criterion 8 | smoothing, lane input, prediction, metrics equivariant to 1e-6");
}

// ===========================================================================
// Criterion 9: a toy model overfits one sample
// ===========================================================================

#[test]
fn c09_toy_model_overfits_single_sample() {
    let scenes = generate(&GeneratorConfig {
        seed: 5,
        n_scenes: 1,
        ..GeneratorConfig::default()
    });
    let (samples, _) = build_samples(&scenes, &DatasetConfig::default());
    let sample = std::slice::from_ref(&samples[0]);

    let model = Model::new(ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_dim: 32,
        map_mode: MapMode::Lane,
        regression_mode: RegressionMode::Ar,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut opt = Optimizer::new(1e-3, 0.9999);
    let initial = model.compute_loss(&samples[0]).unwrap().1.total;
    for step in 0..200 {
        model.train_epoch(sample, &mut opt, 1, step).unwrap();
    }
    let fin = model.compute_loss(&samples[0]).unwrap().1.total;
    println!(
        "criterion 9 | loss {initial:.4} -> {fin:.4} ({:.1}% reduction) in 200 steps",
        100.0 * (1.0 - fin / initial)
    );
    assert!(
        fin <= 0.10 * initial,
        "only reached {fin:.4} from {initial:.4}; needs >=90% reduction"
    );
}

// ===========================================================================
// Criterion 10: the CLI pipeline is byte-reproducible
// ===========================================================================

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_lanecast"))
        .args(args)
        .output()
        .expect("spawning the pipeline binary");
    assert!(
        out.status.success(),
        "lanecast {:?} failed:\n{}{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn full_run(dir: &Path) -> Vec<u8> {
    let raw = dir.join("raw");
    let prep = dir.join("prep");
    let ckpt = dir.join("model.ckpt");
    let report = dir.join("report.csv");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    run_cli(&["gen-synth", "--out", &s(&raw), "--seed", "21"]);
    run_cli(&[
        "preprocess",
        "--in",
        &s(&raw),
        "--out",
        &s(&prep),
        "--rotation-step",
        "90",
        "--rotation-count",
        "4",
        "--turn-upsample",
        "2",
    ]);
    run_cli(&[
        "train",
        "--data",
        &s(&prep),
        "--mode",
        "ar",
        "--map",
        "lane",
        "--epochs",
        "1",
        "--out",
        &s(&ckpt),
        "--d-model",
        "16",
        "--n-heads",
        "2",
        "--enc-layers",
        "1",
        "--dec-layers",
        "1",
        "--ff-dim",
        "32",
        "--seed",
        "21",
        "--max-train-samples",
        "64",
    ]);
    run_cli(&["eval", "--data", &s(&prep), "--ckpt", &s(&ckpt), "--report", &s(&report)]);
    std::fs::read(&report).unwrap()
}

#[test]
fn c10_end_to_end_runs_are_byte_identical() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = full_run(d1.path());
    let r2 = full_run(d2.path());
    assert!(!r1.is_empty());
    assert_eq!(r1, r2, "metric reports differ between identical runs");
    println!("criterion 10 | two end-to-end runs produced byte-identical reports");
}
