//! Numbered acceptance gates for the whole pipeline: statistical checks on
//! the bridge sampler, exact transition degeneracies, finite-difference
//! verification of every loss term, an information-estimator sanity bound,
//! locality and metric closed forms, the phantom end-to-end benchmark with
//! its ablation comparator, plumbing and determinism guarantees, and the
//! parameter-count oracle. Each test is one gate; the harness line is the
//! pass/fail record, and measured values are printed for `--show-output`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fgsb_core::autodiff::{check_gradients, probe_entries, Adam, Graph, NodeId, ParamId, ParamStore};
use fgsb_core::bridge::{bridge_posterior_sample, inference_transition, training_transition};
use fgsb_core::losses::{
    dv_objective, loss_adv_discriminator, loss_adv_generator, loss_cpl, loss_identity,
    loss_mi_estimator, loss_mi_generator, loss_patchnce, loss_rec, nce_location_weights,
    sample_nce_locations, LossWeights,
};
use fgsb_core::metrics;
use fgsb_core::models::{
    build_models, count_parameters, CropBox, ModelConfig, ModelParts, Models,
};
use fgsb_core::nn::{Fwd, LinearLayer};
use fgsb_core::phantom::{self, PhantomConfig};
use fgsb_core::rng::{stream, SeedRng};
use fgsb_core::trainer::{
    load_checkpoint, read_checkpoint_header, save_checkpoint, train_epoch, AblationFlags,
    TrainConfig, TrainState,
};
use fgsb_core::{bridge::BridgeConfig, dataset};
use ndarray::{Array2, ArrayD, IxDyn};

// ── shared helpers ─────────────────────────────────────────────────────────

fn image_f64(seed: f64, canvas: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[1, 1, canvas, canvas]), |ix| {
        ((ix[2] as f64 * 0.31 + ix[3] as f64 * 0.17 + seed).sin() * 0.8).clamp(-1.0, 1.0)
    })
}

/// Left-half support mask in network layout plus the matching binary grid.
fn half_mask_f64(canvas: usize) -> (ArrayD<f64>, Array2<u8>) {
    let dense = ArrayD::from_shape_fn(IxDyn(&[1, 1, canvas, canvas]), |ix| {
        if ix[3] < canvas / 2 {
            1.0
        } else {
            0.0
        }
    });
    let grid = Array2::from_shape_fn((canvas, canvas), |(_, x)| u8::from(x < canvas / 2));
    (dense, grid)
}

fn miniature_bundle(seed: u64) -> (ParamStore<f64>, Models) {
    let mut store = ParamStore::<f64>::new();
    let models = build_models(&mut store, seed, &ModelConfig::miniature(), ModelParts::default())
        .expect("miniature build");
    (store, models)
}

fn fgsb_bin(args: &[&str], label: &str) {
    let out = Command::new(env!("CARGO_BIN_EXE_fgsb"))
        .args(args)
        .output()
        .unwrap_or_else(|e| panic!("{label}: failed to spawn: {e}"));
    assert!(
        out.status.success(),
        "{label}: exited {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

/// Directory snapshot as sorted (name, bytes) pairs.
fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut rows: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap_or_else(|e| panic!("listing {}: {e}", dir.display()))
        .map(|entry| {
            let entry = entry.expect("dir entry");
            let name = entry.file_name().to_string_lossy().into_owned();
            let bytes = std::fs::read(entry.path()).expect("read entry");
            (name, bytes)
        })
        .collect();
    rows.sort();
    rows
}

// ── 1: bridge posterior statistics ─────────────────────────────────────────

#[test]
fn criterion_01_bridge_posterior_statistics() {
    let start = Instant::now();
    let canvas = 4usize;
    let n = 10_000usize;
    let tau = 0.04;
    let x_a = Array2::from_shape_fn((canvas, canvas), |(y, x)| {
        (y as f64 * 0.7 - x as f64 * 0.3).sin() * 0.6
    });
    let x_b = Array2::from_shape_fn((canvas, canvas), |(y, x)| {
        (y as f64 * 0.2 + x as f64 * 0.9).cos() * 0.5
    });

    let mut worst_mean_z = 0.0f64;
    let mut worst_std_z = 0.0f64;
    for (k, &t) in [0.25, 0.5, 0.75].iter().enumerate() {
        let mut rng = SeedRng::derive(901, stream::EVAL, &[k as u64]);
        let mut sum = Array2::<f64>::zeros((canvas, canvas));
        let mut sumsq = Array2::<f64>::zeros((canvas, canvas));
        for _ in 0..n {
            let s = bridge_posterior_sample(&x_a, &x_b, t, tau, &mut rng).expect("sample");
            sum += &s;
            sumsq += &s.mapv(|v| v * v);
        }
        let sigma = (t * (1.0 - t) * tau).sqrt();
        let se_mean = sigma / (n as f64).sqrt();
        let se_std = sigma / (2.0 * (n as f64 - 1.0)).sqrt();
        for y in 0..canvas {
            for x in 0..canvas {
                let expected = t * x_b[[y, x]] + (1.0 - t) * x_a[[y, x]];
                let mean = sum[[y, x]] / n as f64;
                let var = (sumsq[[y, x]] - n as f64 * mean * mean) / (n as f64 - 1.0);
                let std = var.max(0.0).sqrt();
                let zm = (mean - expected).abs() / se_mean;
                let zs = (std - sigma).abs() / se_std;
                worst_mean_z = worst_mean_z.max(zm);
                worst_std_z = worst_std_z.max(zs);
                assert!(zm <= 3.0, "t={t} pixel ({y},{x}): mean z-score {zm:.2} > 3");
                assert!(zs <= 3.0, "t={t} pixel ({y},{x}): std z-score {zs:.2} > 3");
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "bridge statistics took {elapsed:.1}s (budget 10s)");
    println!(
        "[criterion 1] PASS bridge statistics: 3 x {n} samples, worst mean z {worst_mean_z:.2}, \
         worst std z {worst_std_z:.2}, {elapsed:.2}s"
    );
}

// ── 2: transition degeneracies ─────────────────────────────────────────────

#[test]
fn criterion_02_transition_degeneracies() {
    let canvas = 8usize;
    let x_b = Array2::from_shape_fn((canvas, canvas), |(y, x)| {
        ((y * 13 + x * 7) as f32 * 0.113).sin()
    });
    let x_prev = Array2::from_shape_fn((canvas, canvas), |(y, x)| {
        ((y * 5 + x * 11) as f32 * 0.207).cos()
    });
    let bits = |a: &Array2<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();

    let mut rng = SeedRng::derive(3, stream::EVAL, &[0]);
    let to_b = training_transition(&x_b, &x_prev, 1.0, 0.0, &mut rng).expect("s=1");
    assert_eq!(bits(&to_b), bits(&x_b), "s=1, tau=0 must return the reference exactly");

    let to_prev = training_transition(&x_b, &x_prev, 0.0, 0.0, &mut rng).expect("s=0");
    assert_eq!(bits(&to_prev), bits(&x_prev), "s=0, tau=0 must return the prediction exactly");

    let ident = inference_transition(&x_prev, 0.0, &mut rng);
    assert_eq!(bits(&ident), bits(&x_prev), "tau=0 inference transition must be the identity");

    println!("[criterion 2] PASS transition degeneracies: all three corners bit-exact");
}

// ── 3: loss-term gradient checks ───────────────────────────────────────────

/// Probe entries for `pids`, excluding the generator trunk's convolution
/// biases: each is followed by an instance normalization, which removes
/// per-channel additive shifts exactly, so those gradients are zero by
/// construction and finite differences can only measure rounding noise
/// against the relative-error floor.
fn live_entries(store: &ParamStore<f64>, pids: &[ParamId]) -> Vec<(ParamId, usize)> {
    probe_entries(store, pids)
        .into_iter()
        .filter(|&(pid, _)| {
            let name = store.name(pid);
            let shadowed = name.starts_with("generator.")
                && name.ends_with(".b")
                && !name.contains(".film")
                && !name.contains(".cond.")
                && name != "generator.out.b";
            !shadowed
        })
        .collect()
}

/// FD-verify one loss closure over the probed parameter entries. `h` is the
/// relative step: 1e-5 by default, smaller where a rectifier-heavy path
/// needs a narrower crossing window (f64 leaves ample headroom).
fn grad_gate(
    name: &str,
    store: &mut ParamStore<f64>,
    entries: &[(ParamId, usize)],
    h: f64,
    run: impl FnMut(&mut ParamStore<f64>, bool) -> f64,
) -> (usize, f64) {
    let report = check_gradients(store, entries, h, run);
    assert!(
        report.max_rel_err < 1e-4,
        "{name}: rel err {} at {}",
        report.max_rel_err,
        report.worst_param
    );
    (report.checked, report.max_rel_err)
}

#[test]
fn criterion_03_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    let canvas = 32usize;
    let (mut store, models) = miniature_bundle(41);
    let total_params = count_parameters(&store, "");
    assert!(total_params <= 5000, "miniature bundle has {total_params} params (budget 5k)");

    // The adversarial networks carry no normalization, so the 0.02-std init
    // attenuates signals until pre-activations sit at the probe-step scale,
    // right at the rectifier kinks where central differences are undefined.
    // Gradients must be correct at any parameter point; probe at a healthy
    // one: boosted weights, biases nudged off zero.
    let mut shift_rng = SeedRng::derive(43, stream::MODEL_INIT, &[9]);
    for pid in store.ids() {
        let name = store.name(pid).to_string();
        if ["discriminator.", "critic.", "projector."].iter().any(|p| name.starts_with(p)) {
            let tensor = store.value_mut(pid);
            if name.ends_with(".w") {
                tensor.mapv_inplace(|v| v * 11.0);
            } else {
                tensor.mapv_inplace(|_| shift_rng.normal() * 0.05);
            }
        }
    }

    let x_t = image_f64(0.3, canvas);
    let x_a = image_f64(1.1, canvas);
    let x_b = image_f64(2.2, canvas);
    let (mask, mask_grid) = half_mask_f64(canvas);
    let z = ArrayD::from_shape_fn(IxDyn(&[1, 2]), |ix| (ix[1] as f64 * 0.4 + 0.2).cos());
    let t = 1usize;
    let crop = CropBox { y0: 4, x0: 8, size: canvas / 2 };

    let cfg = ModelConfig::miniature();
    let locs_of = |weighted: bool| -> Vec<Vec<(usize, usize)>> {
        let mut rng = SeedRng::derive(77, stream::EVAL, &[u64::from(weighted)]);
        cfg.tap_strides()
            .iter()
            .map(|&s| {
                let grid = canvas / s;
                let w = weighted.then(|| nce_location_weights(Some(&mask_grid), s, grid, grid));
                sample_nce_locations(&mut rng, grid, grid, 8, w.as_deref()).expect("locations")
            })
            .collect()
    };
    let locs_uniform = locs_of(false);
    let locs_weighted = locs_of(true);

    let gen_ids = |store: &ParamStore<f64>| {
        let mut ids = store.ids_with_prefix("generator.");
        ids.extend(store.ids_with_prefix("projector."));
        ids
    };
    let adv_ids = |store: &ParamStore<f64>| {
        let mut ids = store.ids_with_prefix("generator.");
        ids.extend(store.ids_with_prefix("discriminator."));
        ids
    };

    let negatives: Vec<ArrayD<f64>> = vec![image_f64(3.3, canvas), image_f64(4.4, canvas)];
    let mut summary: Vec<(&str, usize, f64)> = Vec::new();

    // rec: reconstruction through the generator.
    let entries = live_entries(&store, &store.ids_with_prefix("generator."));
    let r = grad_gate("rec", &mut store, &entries, 1e-5, |store, with_grad| {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, store);
        let input = fwd.graph.leaf(x_t.clone());
        let (x_hat, _) = models.generator.forward(&mut fwd, input, t, &z).expect("forward");
        let target = g.leaf(x_b.clone());
        let loss = loss_rec(&mut g, x_hat, target);
        if with_grad {
            g.backward(loss, store);
        }
        g.scalar(loss)
    });
    summary.push(("rec", r.0, r.1));

    // cpl: masked squared error through the generator.
    let entries = live_entries(&store, &store.ids_with_prefix("generator."));
    let r = grad_gate("cpl", &mut store, &entries, 1e-5, |store, with_grad| {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, store);
        let input = fwd.graph.leaf(x_t.clone());
        let (x_hat, _) = models.generator.forward(&mut fwd, input, t, &z).expect("forward");
        let target = g.leaf(x_b.clone());
        let loss = loss_cpl(&mut g, x_hat, target, &mask);
        if with_grad {
            g.backward(loss, store);
        }
        g.scalar(loss)
    });
    summary.push(("cpl", r.0, r.1));

    // adv (generator side) with a live discriminator: both networks get
    // grads. A textured constant offset moves the fresh generator's
    // near-gray output away from the rectifier kinks, where central
    // differences are meaningless; the chain rule through both networks is
    // exercised unchanged.
    let entries = live_entries(&store, &adv_ids(&store));
    let r = grad_gate("adv", &mut store, &entries, 3e-6, |store, with_grad| {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, store);
        let input = fwd.graph.leaf(x_t.clone());
        let (x_hat, _) = models.generator.forward(&mut fwd, input, t, &z).expect("forward");
        let offset = fwd.graph.leaf(x_a.clone());
        let shifted = fwd.graph.add(x_hat, offset);
        let disc = models.discriminator.as_ref().expect("discriminator");
        let out = disc.forward(&mut fwd, shifted, t);
        let loss = loss_adv_generator(&mut g, out.score);
        if with_grad {
            g.backward(loss, store);
        }
        g.scalar(loss)
    });
    summary.push(("adv", r.0, r.1));

    // d_total: the self-supervised discriminator objective.
    let entries = live_entries(&store, &store.ids_with_prefix("discriminator."));
    let r = grad_gate("d_total", &mut store, &entries, 3e-6, |store, with_grad| {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, store);
        let disc = models.discriminator.as_ref().expect("discriminator");
        let out =
            loss_adv_discriminator(&mut fwd, disc, &x_a, &x_b, t, &crop).expect("ssl objective");
        if with_grad {
            g.backward(out.total, store);
        }
        g.scalar(out.total)
    });
    summary.push(("d_total", r.0, r.1));

    // nce / wnce: patch contrastive, uniform and mask-weighted locations.
    for (name, locs) in [("nce", &locs_uniform), ("wnce", &locs_weighted)] {
        let entries = live_entries(&store, &gen_ids(&store));
        let r = grad_gate(name, &mut store, &entries, 3e-6, |store, with_grad| {
            let mut g = Graph::new();
            let mut fwd = Fwd::new(&mut g, store);
            let input = fwd.graph.leaf(x_t.clone());
            let (x_hat, _) = models.generator.forward(&mut fwd, input, t, &z).expect("forward");
            let source = fwd.graph.leaf(x_a.clone());
            let q = models.generator.encode(&mut fwd, x_hat, t).expect("queries");
            let k = models.generator.encode(&mut fwd, source, t).expect("keys");
            let loss = loss_patchnce(&mut fwd, &models.projector, &q, &k, locs).expect("nce");
            if with_grad {
                g.backward(loss, store);
            }
            g.scalar(loss)
        });
        summary.push((name, r.0, r.1));
    }

    // Critic objective, contrast form and literal form.
    for (name, literal) in [("e_mi", false), ("e_mi_literal", true)] {
        let entries = live_entries(&store, &store.ids_with_prefix("critic."));
        let r = grad_gate(name, &mut store, &entries, 3e-6, |store, with_grad| {
            let mut g = Graph::new();
            let mut fwd = Fwd::new(&mut g, store);
            let critic = models.critic.as_ref().expect("critic");
            let loss = loss_mi_estimator(
                &mut fwd,
                critic,
                &x_t,
                &x_b,
                Some(&mask),
                &negatives,
                literal,
            )
            .expect("estimator objective");
            if with_grad {
                g.backward(loss, store);
            }
            g.scalar(loss)
        });
        summary.push((name, r.0, r.1));
    }

    // mi: generator term against the frozen critic.
    let entries = live_entries(&store, &store.ids_with_prefix("generator."));
    let r = grad_gate("mi", &mut store, &entries, 3e-6, |store, with_grad| {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, store);
        let input = fwd.graph.leaf(x_t.clone());
        let (x_hat, _) = models.generator.forward(&mut fwd, input, t, &z).expect("forward");
        fwd.frozen = true;
        let critic = models.critic.as_ref().expect("critic");
        let loss =
            loss_mi_generator(&mut fwd, critic, &x_t, x_hat, Some(&mask)).expect("mi term");
        if with_grad {
            g.backward(loss, store);
        }
        g.scalar(loss)
    });
    summary.push(("mi", r.0, r.1));

    // idt: identity pathway (reconstruction + contrastive on the target).
    let entries = live_entries(&store, &gen_ids(&store));
    let r = grad_gate("idt", &mut store, &entries, 1e-5, |store, with_grad| {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, store);
        let idt = loss_identity(
            &mut fwd,
            &models.generator,
            &models.projector,
            &x_b,
            t,
            &z,
            &locs_uniform,
        )
        .expect("identity");
        let loss = g.add(idt.rec, idt.nce);
        if with_grad {
            g.backward(loss, store);
        }
        g.scalar(loss)
    });
    summary.push(("idt", r.0, r.1));

    // total: the full weighted generator objective, frozen adversaries.
    let w = LossWeights::default();
    let entries = live_entries(&store, &gen_ids(&store));
    let r = grad_gate("total", &mut store, &entries, 3e-6, |store, with_grad| {
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, store);
        let input = fwd.graph.leaf(x_t.clone());
        let (x_hat, _) = models.generator.forward(&mut fwd, input, t, &z).expect("forward");
        let target = fwd.graph.leaf(x_b.clone());
        let source = fwd.graph.leaf(x_a.clone());

        let rec = loss_rec(fwd.graph, x_hat, target);
        let q = models.generator.encode(&mut fwd, x_hat, t).expect("queries");
        let k = models.generator.encode(&mut fwd, source, t).expect("keys");
        let nce =
            loss_patchnce(&mut fwd, &models.projector, &q, &k, &locs_uniform).expect("nce");
        let cpl = loss_cpl(fwd.graph, x_hat, target, &mask);
        let wnce =
            loss_patchnce(&mut fwd, &models.projector, &q, &k, &locs_weighted).expect("wnce");

        fwd.frozen = true;
        let disc = models.discriminator.as_ref().expect("discriminator");
        let score = disc.forward(&mut fwd, x_hat, t).score;
        let adv = loss_adv_generator(fwd.graph, score);
        let critic = models.critic.as_ref().expect("critic");
        let mi = loss_mi_generator(&mut fwd, critic, &x_t, x_hat, Some(&mask)).expect("mi");
        fwd.frozen = false;

        let idt = loss_identity(
            &mut fwd,
            &models.generator,
            &models.projector,
            &x_b,
            t,
            &z,
            &locs_uniform,
        )
        .expect("identity");

        let mut total = adv;
        for (node, weight) in [
            (rec, w.lambda_rec),
            (nce, w.lambda_reg),
            (cpl, w.lambda_cpl),
            (wnce, w.lambda_wreg),
            (mi, w.lambda_sb),
            (idt.rec, w.lambda_idt * w.lambda_rec),
            (idt.nce, w.lambda_idt * w.lambda_reg),
        ] {
            let scaled = g.scale(node, weight);
            total = g.add(total, scaled);
        }
        if with_grad {
            g.backward(total, store);
        }
        g.scalar(total)
    });
    summary.push(("total", r.0, r.1));

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient checks took {elapsed:.1}s (budget 60s)");
    let worst =
        summary.iter().map(|&(_, _, e)| e).fold(0.0f64, f64::max);
    let checked: usize = summary.iter().map(|&(_, n, _)| n).sum();
    println!(
        "[criterion 3] PASS gradient checks: {} terms, {checked} probes on a {total_params}-param \
         bundle, worst rel err {worst:.2e}, {elapsed:.1}s",
        summary.len()
    );
}

// ── 4: information estimator on correlated Gaussians ───────────────────────

/// Three-layer scalar critic over (x, y) pairs.
struct PairCritic {
    l1: LinearLayer,
    l2: LinearLayer,
    l3: LinearLayer,
}

impl PairCritic {
    fn new(store: &mut ParamStore<f64>, rng: &mut SeedRng, hidden: usize) -> Self {
        PairCritic {
            l1: LinearLayer::new(store, rng, "pair.l1", 2, hidden).expect("l1"),
            l2: LinearLayer::new(store, rng, "pair.l2", hidden, hidden).expect("l2"),
            l3: LinearLayer::new(store, rng, "pair.l3", hidden, 1).expect("l3"),
        }
    }

    fn score(&self, fwd: &mut Fwd<f64>, pairs: ArrayD<f64>) -> NodeId {
        let x = fwd.graph.leaf(pairs);
        let h = self.l1.apply(fwd, x);
        let h = fwd.graph.relu(h);
        let h = self.l2.apply(fwd, h);
        let h = fwd.graph.relu(h);
        self.l3.apply(fwd, h)
    }
}

/// (joint, marginal) sample batches for correlated standard Gaussians.
fn gaussian_batch(rng: &mut SeedRng, rho: f64, n: usize) -> (ArrayD<f64>, ArrayD<f64>) {
    let noise = (1.0 - rho * rho).sqrt();
    let mut joint = ArrayD::zeros(IxDyn(&[n, 2]));
    let mut marginal = ArrayD::zeros(IxDyn(&[n, 2]));
    for i in 0..n {
        let x = rng.normal();
        joint[[i, 0]] = x;
        joint[[i, 1]] = rho * x + noise * rng.normal();
        marginal[[i, 0]] = rng.normal();
        marginal[[i, 1]] = rng.normal();
    }
    (joint, marginal)
}

#[test]
fn criterion_04_information_estimator_recovers_gaussian_mi() {
    let start = Instant::now();
    let rho = 0.9f64;
    let analytic = -0.5 * (1.0 - rho * rho).ln();
    let steps = 3000usize;
    assert!(steps <= 5000);

    let mut store = ParamStore::<f64>::new();
    let mut init_rng = SeedRng::derive(54, stream::MODEL_INIT, &[]);
    let critic = PairCritic::new(&mut store, &mut init_rng, 16);
    let mut opt = Adam::new(&store, store.ids());
    let mut data_rng = SeedRng::derive(54, stream::EVAL, &[]);

    for _ in 0..steps {
        let (joint, marginal) = gaussian_batch(&mut data_rng, rho, 256);
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, &store);
        let joint_scores = critic.score(&mut fwd, joint);
        let marginal_scores = critic.score(&mut fwd, marginal);
        let loss = dv_objective(&mut g, joint_scores, marginal_scores);
        store.zero_all_grads();
        g.backward(loss, &mut store);
        opt.step(&mut store, 1e-3);
    }

    // Estimate on held-out batches with the critic fixed.
    let eval_batches = 16usize;
    let mut estimate = 0.0;
    for _ in 0..eval_batches {
        let (joint, marginal) = gaussian_batch(&mut data_rng, rho, 4096);
        let mut g = Graph::new();
        let mut fwd = Fwd::new(&mut g, &store);
        let joint_scores = critic.score(&mut fwd, joint);
        let marginal_scores = critic.score(&mut fwd, marginal);
        let loss = dv_objective(&mut g, joint_scores, marginal_scores);
        estimate += -g.scalar(loss) / eval_batches as f64;
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "estimator training took {elapsed:.1}s (budget 120s)");
    assert!(
        (estimate - analytic).abs() <= 0.1,
        "information estimate {estimate:.4} vs analytic {analytic:.4} (tolerance 0.1)"
    );
    println!(
        "[criterion 4] PASS information estimator: {estimate:.4} nats vs analytic \
         {analytic:.4} after {steps} steps, {elapsed:.1}s"
    );
}

// ── 5: context-loss locality ───────────────────────────────────────────────

#[test]
fn criterion_05_context_loss_locality() {
    let canvas = 32usize;
    let x_hat = image_f64(0.6, canvas).mapv(|v| v as f32);
    let x_b = image_f64(1.9, canvas).mapv(|v| v as f32);
    let (mask, _) = half_mask_f64(canvas);
    let mask = mask.mapv(|v| v as f32);

    let eval = |pred: &ArrayD<f32>| -> f32 {
        let mut g = Graph::<f32>::new();
        let p = g.leaf(pred.clone());
        let b = g.leaf(x_b.clone());
        let loss = loss_cpl(&mut g, p, b, &mask);
        g.scalar(loss)
    };
    let base = eval(&x_hat).to_bits();

    let mut rng = SeedRng::derive(12, stream::EVAL, &[5]);
    for trial in 0..1000 {
        let mut perturbed = x_hat.clone();
        for _ in 0..16 {
            let y = rng.below(canvas);
            let x = canvas / 2 + rng.below(canvas / 2);
            perturbed[[0, 0, y, x]] += (rng.normal() * 3.0) as f32;
        }
        assert_eq!(
            eval(&perturbed).to_bits(),
            base,
            "perturbation {trial} outside the mask support changed the context loss"
        );
    }
    println!(
        "[criterion 5] PASS context-loss locality: 1000 out-of-support perturbations, \
         zero value change"
    );
}

// ── 6: metric closed forms ─────────────────────────────────────────────────

#[test]
fn criterion_06_metric_closed_forms() {
    let flat = Array2::from_elem((16, 16), 0.5);
    let offset = flat.mapv(|v| v + 0.1);
    let psnr = metrics::psnr(&offset, &flat, 1.0).expect("psnr");
    assert!((psnr - 20.0).abs() < 1e-9, "offset-0.1 psnr {psnr} != 20 dB");
    assert_eq!(metrics::psnr(&flat, &flat, 1.0).expect("psnr cap"), 100.0);

    let ones = Array2::from_elem((16, 16), 1.0);
    let ones_off = Array2::from_elem((16, 16), 1.1);
    let nrmse = metrics::nrmse(&ones_off, &ones).expect("nrmse");
    assert!((nrmse - 0.1).abs() < 1e-9, "constant nrmse {nrmse} != 0.1");

    let textured = Array2::from_shape_fn((16, 16), |(y, x)| {
        0.5 + 0.4 * ((y as f64 * 0.8).sin() * (x as f64 * 0.6).cos())
    });
    assert_eq!(metrics::ssim(&textured, &textured, 1.0).expect("ssim"), 1.0);

    let m = |rows: &[&[u8]]| {
        Array2::from_shape_fn((rows.len(), rows[0].len()), |(y, x)| rows[y][x])
    };
    let full = m(&[&[1, 1], &[1, 0]]);
    assert_eq!(metrics::dice_recall(&full, &full).expect("identical"), (1.0, 1.0));
    let left = m(&[&[1, 0], &[1, 0]]);
    let right = m(&[&[0, 1], &[0, 1]]);
    assert_eq!(metrics::dice_recall(&left, &right).expect("disjoint"), (0.0, 0.0));
    let a = m(&[&[1, 1], &[0, 0]]);
    let b = m(&[&[1, 0], &[1, 0]]);
    assert_eq!(metrics::dice_recall(&a, &b).expect("half overlap"), (0.5, 0.5));
    let empty = m(&[&[0, 0], &[0, 0]]);
    assert_eq!(metrics::dice_recall(&empty, &empty).expect("both empty"), (1.0, 1.0));
    assert_eq!(metrics::dice_recall(&a, &empty).expect("spurious prediction"), (0.0, 0.0));

    println!("[criterion 6] PASS metric closed forms: psnr/nrmse/ssim/overlap table exact");
}

// ── 7: phantom end-to-end benchmark ────────────────────────────────────────

#[test]
fn criterion_07_phantom_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let data = root.join("data");

    fgsb_bin(&["make-phantom", "--out", data.to_str().unwrap()], "make-phantom");

    let base_toml = root.join("base.toml");
    std::fs::write(
        &base_toml,
        format!(
            "[data]\nmanifest = \"{}\"\nout_dir = \"{}\"\n\n[train]\nepochs = 200\ncheckpoint_every = 100\n",
            data.join("manifest.jsonl").display(),
            root.join("unused").display(),
        ),
    )
    .expect("write base config");

    let abl = root.join("abl");
    fgsb_bin(
        &[
            "ablate",
            "--config",
            base_toml.to_str().unwrap(),
            "--out",
            abl.to_str().unwrap(),
            "--variants",
            "full,no_sb",
        ],
        "ablate full,no_sb",
    );

    let manifest = data.join("manifest.jsonl");
    let refs = data.join("slices");
    let mut results: Vec<(String, f64, f64)> = Vec::new();
    let mut reports = serde_json::Map::new();
    for variant in ["full", "no_sb", "base"] {
        let preds = root.join(format!("preds_{variant}"));
        if variant == "base" {
            fgsb_bin(
                &[
                    "synthesize",
                    "--identity",
                    "--manifest",
                    manifest.to_str().unwrap(),
                    "--split",
                    "test",
                    "--out",
                    preds.to_str().unwrap(),
                ],
                "synthesize identity",
            );
        } else {
            let ckpt = abl.join(variant).join("latest.ckpt");
            fgsb_bin(
                &[
                    "synthesize",
                    "--checkpoint",
                    ckpt.to_str().unwrap(),
                    "--manifest",
                    manifest.to_str().unwrap(),
                    "--split",
                    "test",
                    "--out",
                    preds.to_str().unwrap(),
                ],
                "synthesize variant",
            );
        }
        let eval = root.join(format!("eval_{variant}"));
        fgsb_bin(
            &[
                "evaluate",
                "--pred",
                preds.to_str().unwrap(),
                "--ref",
                refs.to_str().unwrap(),
                "--out",
                eval.to_str().unwrap(),
            ],
            "evaluate variant",
        );
        let report = read_json(&eval.join("report.json"));
        let agg = &report["aggregate"];
        let psnr = agg["psnr"]["mean"].as_f64().expect("psnr mean");
        let recall = agg["recall"]["mean"].as_f64().expect("recall mean");
        results.push((variant.to_string(), psnr, recall));
        reports.insert(variant.to_string(), agg.clone());
    }

    let get = |name: &str| results.iter().find(|r| r.0 == name).expect("variant row");
    let full = get("full");
    let no_sb = get("no_sb");
    let base = get("base");
    let psnr_margin = full.1 - (base.1 + 3.0);
    let recall_margin = full.2 - no_sb.2;
    let elapsed = start.elapsed().as_secs_f64();

    // Persist the measured margins next to the build artifacts.
    let record = serde_json::json!({
        "psnr_margin_over_baseline_plus_3db": psnr_margin,
        "recall_margin_over_ablation": recall_margin,
        "elapsed_seconds": elapsed,
        "aggregates": reports,
    });
    let out_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance");
    std::fs::create_dir_all(&out_dir).expect("acceptance artifact dir");
    std::fs::write(
        out_dir.join("e2e_margins.json"),
        serde_json::to_string_pretty(&record).expect("margins json") + "\n",
    )
    .expect("write margins");

    assert!(elapsed <= 12.0 * 3600.0, "end-to-end run took {elapsed:.0}s (budget 12h)");
    assert!(
        full.1 >= base.1 + 3.0,
        "held-out psnr {:.2} dB does not exceed the identity baseline {:.2} dB by 3 dB",
        full.1,
        base.1
    );
    assert!(
        full.2 > no_sb.2,
        "held-out lesion recall {:.4} does not exceed the reduced variant's {:.4}",
        full.2,
        no_sb.2
    );
    println!(
        "[criterion 7] PASS phantom end-to-end: psnr {:.2} dB (baseline {:.2} + 3, margin \
         {psnr_margin:+.2}), recall {:.4} vs {:.4} (margin {recall_margin:+.4}), {:.0}s",
        full.1, base.1, full.2, no_sb.2, elapsed
    );
}

// ── 8: ablation plumbing ───────────────────────────────────────────────────

#[test]
fn criterion_08_ablation_plumbing() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let data = root.join("data");
    fgsb_bin(
        &[
            "make-phantom",
            "--out",
            data.to_str().unwrap(),
            "--slices",
            "6",
            "--canvas",
            "32",
        ],
        "make-phantom tiny",
    );

    let tiny_toml = root.join("tiny.toml");
    std::fs::write(
        &tiny_toml,
        format!(
            "[data]\nmanifest = \"{}\"\nout_dir = \"{}\"\n\n[model]\nngf = 1\nndf = 1\nncf = 1\n\
             n_res_blocks = 1\ntime_embed_dim = 4\nz_dim = 2\ncond_dim = 4\nproj_dim = 4\n\n\
             [train]\nepochs = 1\nbatch = 2\nmi_negatives = 2\ncheckpoint_every = 1\n",
            data.join("manifest.jsonl").display(),
            root.join("unused").display(),
        ),
    )
    .expect("write tiny config");

    let abl = root.join("abl");
    fgsb_bin(
        &["ablate", "--config", tiny_toml.to_str().unwrap(), "--out", abl.to_str().unwrap()],
        "ablate standard sweep",
    );

    let variants = ["full", "no_sb", "no_ssl_d", "no_noise", "nfe1", "nfe3"];
    let summary = read_json(&abl.join("summary.json"));
    assert_eq!(summary.as_array().map(Vec::len), Some(variants.len()), "summary rows");

    let mut digests = Vec::new();
    for v in variants {
        let run = abl.join(v);
        assert!(run.join("latest.ckpt").is_file(), "{v}: checkpoint");
        assert!(run.join("metrics.jsonl").is_file(), "{v}: metrics stream");
        let digest = std::fs::read_to_string(run.join("config.sha256")).expect("digest file");
        digests.push(digest.trim().to_string());
    }
    let mut unique = digests.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), variants.len(), "resolved configs must all differ: {digests:?}");

    // The noise-free variant: flag set, zeroed sampling variance, bit-stable
    // synthesis (the training side reads the flag and zeroes its own noise).
    let no_noise_cfg = read_json(&abl.join("no_noise").join("config.json"));
    assert_eq!(no_noise_cfg["train"]["ablation"]["no_noise"].as_bool(), Some(true));
    assert_eq!(no_noise_cfg["inference"]["tau"].as_f64(), Some(0.0));
    let ckpt = abl.join("no_noise").join("latest.ckpt");
    let manifest = data.join("manifest.jsonl");
    for out in ["p1", "p2"] {
        fgsb_bin(
            &[
                "synthesize",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--manifest",
                manifest.to_str().unwrap(),
                "--split",
                "test",
                "--out",
                root.join(out).to_str().unwrap(),
            ],
            "synthesize no_noise",
        );
    }
    let (p1, p2) = (dir_bytes(&root.join("p1")), dir_bytes(&root.join("p2")));
    assert!(!p1.is_empty(), "no_noise synthesis produced no slices");
    assert_eq!(p1, p2, "repeated no_noise synthesis must be byte-identical");

    // The plain-discriminator variant must carry no decoder parameters.
    let header = read_checkpoint_header(&abl.join("no_ssl_d").join("latest.ckpt"))
        .expect("no_ssl_d header");
    let decoder_params: Vec<&str> = header
        .params
        .iter()
        .map(|p| p.name.as_str())
        .filter(|n| n.starts_with("discriminator.dec"))
        .collect();
    assert!(decoder_params.is_empty(), "decoder parameters present: {decoder_params:?}");

    println!(
        "[criterion 8] PASS ablation plumbing: 6 distinct runs, noise-free sampling \
         byte-stable over {} slices, decoder-free checkpoint verified",
        p1.len()
    );
}

// ── 9: determinism and resume ──────────────────────────────────────────────

fn mini_run_config() -> (ModelConfig, BridgeConfig, TrainConfig) {
    let model = ModelConfig::miniature();
    let bridge = BridgeConfig { nfe: 3, ..BridgeConfig::default() };
    let train = TrainConfig {
        epochs: 4,
        batch: 2,
        mi_negatives: 2,
        seed: 13,
        ablation: AblationFlags::default(),
        ..TrainConfig::default()
    };
    (model, bridge, train)
}

#[test]
fn criterion_09_determinism_and_resume() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = PhantomConfig {
        subjects: 2,
        slices_per_subject: 6,
        canvas: 32,
        lesion_rate: 0.9,
        seed: 23,
    };
    let manifest = phantom::write_phantom_dataset(dir.path(), &cfg).expect("phantom");
    let ds = dataset::load_dataset(&manifest).expect("load");
    assert!(!ds.train.is_empty());
    let (model, bridge, train) = mini_run_config();

    let run = |epochs: std::ops::Range<usize>, state: &mut TrainState| -> Vec<String> {
        let mut records = Vec::new();
        for epoch in epochs {
            train_epoch(state, &ds.train, epoch, |rec| {
                records.push(serde_json::to_string(rec).expect("record"));
                Ok(())
            })
            .expect("epoch");
        }
        records
    };

    // Identical seeds must reproduce the metrics stream record for record.
    let mut a = TrainState::new(&model, &bridge, &train).expect("state a");
    let stream_a = run(0..4, &mut a);
    let mut b = TrainState::new(&model, &bridge, &train).expect("state b");
    let stream_b = run(0..4, &mut b);
    assert_eq!(stream_a, stream_b, "fixed-seed training diverged");

    // Interrupt at the halfway point, reload, and continue: the parameters
    // and the remaining stream must match the uninterrupted run bit for bit.
    let mut c = TrainState::new(&model, &bridge, &train).expect("state c");
    let head = run(0..2, &mut c);
    let ckpt = dir.path().join("mid.ckpt");
    save_checkpoint(&ckpt, &c, "digest", &serde_json::json!({})).expect("save");
    let (_, mut resumed) = load_checkpoint(&ckpt).expect("load");
    assert_eq!(resumed.next_epoch, 2);
    let tail = run(2..4, &mut resumed);
    let rejoined: Vec<String> = head.into_iter().chain(tail).collect();
    assert_eq!(rejoined, stream_a, "resumed stream diverged from the uninterrupted run");

    assert_eq!(resumed.global_step, a.global_step);
    for (&pa, &pr) in a.store.ids().iter().zip(resumed.store.ids().iter()) {
        assert_eq!(a.store.name(pa), resumed.store.name(pr));
        let va = a.store.value(pa);
        let vr = resumed.store.value(pr);
        assert_eq!(va.shape(), vr.shape());
        let same = va.iter().zip(vr.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "parameter {} differs after resume", a.store.name(pa));
    }
    println!(
        "[criterion 9] PASS determinism and resume: {} records reproduced, {} parameters \
         bit-exact after resume",
        stream_a.len(),
        a.store.ids().len()
    );
}

// ── 10: parameter-count oracle ─────────────────────────────────────────────

/// Independent layer walk over the published architecture.
fn analytic_counts(cfg: &ModelConfig, parts: ModelParts) -> [usize; 4] {
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
    let lin = |i: usize, o: usize| o * i + o;
    let film = |c: usize| 2 * lin(cfg.cond_dim, c);
    let (g, d, c, cd) = (cfg.ngf, cfg.ndf, cfg.ncf, cfg.cond_dim);

    let generator = lin(cfg.time_embed_dim + cfg.z_dim, cd)
        + lin(cd, cd)
        + conv(1, g, 7)
        + film(g)
        + conv(g, 2 * g, 3)
        + film(2 * g)
        + conv(2 * g, 4 * g, 3)
        + film(4 * g)
        + cfg.n_res_blocks * 2 * (conv(4 * g, 4 * g, 3) + film(4 * g))
        + conv(4 * g, 2 * g, 3)
        + film(2 * g)
        + conv(2 * g, g, 3)
        + film(g)
        + conv(g, 1, 7);

    let head = |chans: [usize; 5]| -> usize {
        (0..4).map(|i| conv(chans[i], chans[i + 1], 3) + film(chans[i + 1])).sum()
    };
    let discriminator = if parts.discriminator {
        lin(cfg.time_embed_dim, cd)
            + lin(cd, cd)
            + conv(1, d, 4)
            + conv(d, 2 * d, 4)
            + film(2 * d)
            + conv(2 * d, 4 * d, 4)
            + film(4 * d)
            + conv(4 * d, 4 * d, 4)
            + film(4 * d)
            + conv(4 * d, 1, 4)
            + if parts.decoders {
                head([4 * d, 2 * d, d, d, 1]) + head([2 * d, 2 * d, d, d, 1])
            } else {
                0
            }
    } else {
        0
    };

    let critic = if parts.critic {
        let cin = if cfg.critic_prior_channel { 3 } else { 2 };
        conv(cin, c, 4)
            + conv(c, 2 * c, 4)
            + conv(2 * c, 4 * c, 4)
            + lin(4 * c, 4 * c)
            + lin(4 * c, 1)
    } else {
        0
    };

    let projector: usize =
        [g, 2 * g, 4 * g, 4 * g].iter().map(|&ch| lin(ch, cfg.proj_dim) + lin(cfg.proj_dim, cfg.proj_dim)).sum();

    [generator, discriminator, critic, projector]
}

#[test]
fn criterion_10_parameter_count_oracle() {
    // Reference case: one 3x3 convolution, 1 -> 8 channels.
    let mut probe = ParamStore::<f32>::new();
    let mut rng = SeedRng::derive(1, stream::MODEL_INIT, &[]);
    fgsb_core::nn::Conv2dLayer::new(&mut probe, &mut rng, "probe", 1, 8, 3, 1, 1).expect("conv");
    assert_eq!(count_parameters(&probe, ""), 80);

    let cases: Vec<(&str, ModelConfig, ModelParts)> = vec![
        ("miniature", ModelConfig::miniature(), ModelParts::default()),
        ("desk64", ModelConfig::desk64(), ModelParts::default()),
        ("full-scale", ModelConfig::default_full(), ModelParts::default()),
        (
            "no decoders",
            ModelConfig::desk64(),
            ModelParts { decoders: false, ..ModelParts::default() },
        ),
        (
            "no adversaries",
            ModelConfig::desk64(),
            ModelParts { discriminator: false, decoders: false, critic: false },
        ),
        (
            "pair critic",
            ModelConfig { critic_prior_channel: false, ..ModelConfig::desk64() },
            ModelParts::default(),
        ),
    ];

    let mut desk_total = 0usize;
    for (name, cfg, parts) in cases {
        let mut store = ParamStore::<f32>::new();
        build_models(&mut store, 9, &cfg, parts).expect("build");
        let expected = analytic_counts(&cfg, parts);
        let got = [
            count_parameters(&store, "generator."),
            count_parameters(&store, "discriminator."),
            count_parameters(&store, "critic."),
            count_parameters(&store, "projector."),
        ];
        assert_eq!(got, expected, "{name}: per-network counts drifted from the layer walk");
        assert_eq!(
            count_parameters(&store, ""),
            expected.iter().sum::<usize>(),
            "{name}: totals disagree"
        );
        if name == "desk64" {
            desk_total = expected.iter().sum();
        }
    }
    println!(
        "[criterion 10] PASS parameter counts: conv reference 80, six layer-walk cases exact \
         (desk64 total {desk_total})"
    );
}
