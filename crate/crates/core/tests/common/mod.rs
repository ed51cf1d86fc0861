#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgght_core::numerics::{GradStore, ParamStore, Tensor};
use sgght_core::scm::{self, EmbeddingTable, GroundTruth, ScmInput};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// A random scene for the semantic context module: logits are stored as the
/// parameter `input.z_f` so finite differences reach them too.
pub struct ScmScene {
    pub params: ParamStore,
    pub emb: EmbeddingTable,
    pub subj: Vec<Vec<f64>>,
    pub obj: Vec<Vec<f64>>,
    pub gt_pred: Vec<usize>,
    pub gt_subj: Vec<usize>,
    pub gt_obj: Vec<usize>,
    pub upstream: Tensor,
    pub gap_weight: f64,
}

pub const Z_F: &str = "input.z_f";

/// Pre-activations closer than this to the ReLU kink make central differences
/// straddle it for some entries.
pub const RELU_MARGIN: f64 = 1e-3;

pub const PROJ_GAIN: f64 = 10.0;

/// Keeps the probe loss near 1e-2: central-difference roundoff is about
/// `|L| * 1e-16 / eps`, which must stay under the 1e-8 floor for entries whose
/// gradient is structurally zero (key biases under softmax shift invariance).
pub const UPSTREAM_SCALE: f64 = 2e-3;

impl ScmScene {
    pub fn random(seed: u64, n: usize, dim: usize, classes: usize, slots: usize) -> Self {
        let mut r = rng(seed);
        let mut params = ParamStore::new();
        scm::init_scm_params(&mut params, &mut r, dim, classes).unwrap();
        // Unit-scale encoder inputs keep attention away from uniform.
        params.value_mut(scm::PROJ_W).unwrap().scale(PROJ_GAIN);
        params
            .insert(Z_F, Tensor::from_vec(&[n, classes], random_vec(&mut r, n * classes, 2.0)).unwrap())
            .unwrap();
        let emb = EmbeddingTable::random(seed + 1000, classes, slots);
        let subj = (0..n).map(|_| random_dist(&mut r, slots)).collect();
        let obj = (0..n).map(|_| random_dist(&mut r, slots)).collect();
        let gt_pred = (0..n).map(|_| r.random_range(0..classes)).collect();
        let gt_subj = (0..n).map(|_| r.random_range(0..slots)).collect();
        let gt_obj = (0..n).map(|_| r.random_range(0..slots)).collect();
        let upstream =
            Tensor::from_vec(&[n, classes], random_vec(&mut r, n * classes, UPSTREAM_SCALE)).unwrap();
        Self {
            params,
            emb,
            subj,
            obj,
            gt_pred,
            gt_subj,
            gt_obj,
            upstream,
            gap_weight: r.random_range(UPSTREAM_SCALE..2.0 * UPSTREAM_SCALE),
        }
    }

    pub fn forward(&self, params: &ParamStore, keep: bool) -> scm::ScmOutput {
        let subj: Vec<&[f64]> = self.subj.iter().map(|v| v.as_slice()).collect();
        let obj: Vec<&[f64]> = self.obj.iter().map(|v| v.as_slice()).collect();
        let input = ScmInput {
            z_f: params.value(Z_F),
            subject_dists: &subj,
            object_dists: &obj,
            ground_truth: Some(GroundTruth {
                predicates: &self.gt_pred,
                subjects: &self.gt_subj,
                objects: &self.gt_obj,
            }),
        };
        scm::scm_forward(&input, &self.emb, params, keep).unwrap()
    }

    /// The same scene with relation `i` moved to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = perm.len();
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let pick = |v: &Vec<Vec<f64>>| inv.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let pick_idx = |v: &Vec<usize>| inv.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let z = self.params.value(Z_F);
        let mut z_perm = Tensor::zeros(z.shape());
        for (i, &p) in perm.iter().enumerate() {
            z_perm.row_mut(p).copy_from_slice(z.row(i));
        }
        let mut params = self.params.clone();
        *params.value_mut(Z_F).unwrap() = z_perm;
        Self {
            params,
            emb: self.emb.clone(),
            subj: pick(&self.subj),
            obj: pick(&self.obj),
            gt_pred: pick_idx(&self.gt_pred),
            gt_subj: pick_idx(&self.gt_subj),
            gt_obj: pick_idx(&self.gt_obj),
            upstream: self.upstream.clone(),
            gap_weight: self.gap_weight,
        }
    }

    /// Smallest `|u|` over the feed-forward pre-activations of the predicted path.
    pub fn relu_margin(&self) -> f64 {
        let out = self.forward(&self.params, true);
        let enc = out.cache.as_ref().unwrap().encoder();
        enc.u.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// `<upstream, Z~> + gap_weight * gap(s, t0)` with analytic gradients,
    /// where `t0` is the ground-truth token at `self.params` held constant.
    pub fn loss(&self, params: &ParamStore, grads: &mut GradStore) -> sgght_core::Result<f64> {
        let t0 = self.forward(&self.params, false).t_global.unwrap();
        let out = self.forward(params, true);
        let (gap, _) = scm::semantic_gap_loss(&out.s_global, &t0)?;
        let loss = out
            .z_tilde
            .data()
            .iter()
            .zip(self.upstream.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.gap_weight * gap;
        let d_z_f = scm::scm_backward(
            out.cache.as_ref().unwrap(),
            &self.upstream,
            self.gap_weight,
            &self.emb,
            params,
            grads,
        );
        grads.get_mut(Z_F).add_assign(&d_z_f);
        Ok(loss)
    }
}

pub mod gradsuite {
    use super::*;
    use sgght_core::datagen::{PredicateVocabulary, PriorBias, RelationInstance};
    use sgght_core::losses::{crm_loss, cross_entropy, effective_number_weights, kd_loss, total_loss};
    use sgght_core::scm::semantic_gap_loss;
    use sgght_core::model::{DualBranchModel, ModelDims};
    use sgght_core::numerics::{grad_check_with, GradCheckConfig, GradCheckReport, DEFAULT_EPS};
    use sgght_core::trainer::{image_objective, TrainConfig};

    pub const INSTANCES: u64 = 20;
    pub const TOLERANCE: f64 = 1e-4;

    fn check<F>(loss: F, params: &ParamStore) -> GradCheckReport
    where
        F: Fn(&ParamStore, &mut GradStore) -> sgght_core::Result<f64>,
    {
        grad_check_with(
            loss,
            params,
            GradCheckConfig {
                eps: DEFAULT_EPS,
                max_entries_per_param: Some(200),
            },
        )
        .unwrap()
    }

    fn vector_store(name: &str, v: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::from_vec(&[v.len()], v).unwrap()).unwrap();
        p
    }

    pub fn cross_entropy_reports() -> Vec<GradCheckReport> {
        (0..INSTANCES)
            .map(|seed| {
                let mut r = rng(100 + seed);
                let c = r.random_range(2..=16);
                let y = r.random_range(0..c);
                let p = vector_store("z", random_vec(&mut r, c, 3.0));
                check(
                    |p, g| {
                        let (l, d) = cross_entropy(p.value("z").data(), y)?;
                        g.get_mut("z").data_mut().copy_from_slice(&d);
                        Ok(l)
                    },
                    &p,
                )
            })
            .collect()
    }

    pub fn crm_reports() -> Vec<GradCheckReport> {
        (0..INSTANCES)
            .map(|seed| {
                let mut r = rng(200 + seed);
                let c = r.random_range(3..=16);
                let counts: Vec<u64> = (0..c)
                    .map(|i| if i == 0 { 0 } else { r.random_range(1..2000) })
                    .collect();
                let w = effective_number_weights(&counts, 0.999).unwrap();
                let y = r.random_range(1..c);
                let lambda = r.random_range(0.1..1.0);
                let p = vector_store("z", random_vec(&mut r, c, 3.0));
                check(
                    |p, g| {
                        let (l, d) = crm_loss(p.value("z").data(), y, &w, lambda)?;
                        g.get_mut("z").data_mut().copy_from_slice(&d);
                        Ok(l)
                    },
                    &p,
                )
            })
            .collect()
    }

    fn head_subset(r: &mut ChaCha8Rng, c: usize) -> Vec<usize> {
        let size = r.random_range(2..c.max(3));
        let mut all: Vec<usize> = (1..c).collect();
        use rand::seq::SliceRandom;
        all.shuffle(r);
        let mut h: Vec<usize> = all.into_iter().take(size).collect();
        h.sort_unstable();
        h
    }

    /// Student logits are the parameters; the teacher is a constant.
    pub fn kd_reports() -> Vec<GradCheckReport> {
        (0..INSTANCES)
            .map(|seed| {
                let mut r = rng(300 + seed);
                let c = r.random_range(4..=16);
                let head = head_subset(&mut r, c);
                let tau = [1.0, 2.0, 4.0][seed as usize % 3];
                let teacher = random_vec(&mut r, c, 3.0);
                let p = vector_store("z_o", random_vec(&mut r, c, 3.0));
                check(
                    |p, g| {
                        let (l, d) = kd_loss(&teacher, p.value("z_o").data(), tau, &head)?;
                        g.get_mut("z_o").data_mut().copy_from_slice(&d);
                        Ok(l)
                    },
                    &p,
                )
            })
            .collect()
    }

    pub fn semantic_gap_reports() -> Vec<GradCheckReport> {
        (0..INSTANCES)
            .map(|seed| {
                let mut r = rng(400 + seed);
                let d = r.random_range(1..=16);
                let t = random_vec(&mut r, d, 2.0);
                let p = vector_store("s", random_vec(&mut r, d, 2.0));
                check(
                    |p, g| {
                        let (l, grad) = semantic_gap_loss(p.value("s").data(), &t)?;
                        g.get_mut("s").data_mut().copy_from_slice(&grad);
                        Ok(l)
                    },
                    &p,
                )
            })
            .collect()
    }

    /// `alpha * CE(z_c) + (1 - alpha) * CRM(z_o) + gap(s, t) + mu * KD(teacher, z_o)`
    /// with the teacher a frozen copy of the initial `z_c`.
    pub fn total_reports() -> Vec<GradCheckReport> {
        (0..INSTANCES)
            .map(|seed| {
                let mut r = rng(500 + seed);
                let c = r.random_range(4..=16);
                let d = r.random_range(1..=16);
                let counts: Vec<u64> = (0..c)
                    .map(|i| if i == 0 { 0 } else { r.random_range(1..2000) })
                    .collect();
                let w = effective_number_weights(&counts, 0.999).unwrap();
                let y = r.random_range(1..c);
                let (alpha, lambda, mu, tau) = (
                    r.random_range(0.1..1.0),
                    r.random_range(0.2..1.0),
                    0.05,
                    2.0,
                );
                let head = head_subset(&mut r, c);
                let t = random_vec(&mut r, d, 1.0);
                let mut p = ParamStore::new();
                for (name, n) in [("z_c", c), ("z_o", c), ("s", d)] {
                    p.insert(name, Tensor::from_vec(&[n], random_vec(&mut r, n, 2.0)).unwrap())
                        .unwrap();
                }
                let teacher = p.value("z_c").data().to_vec();
                check(
                    |p, g| {
                        let (ce, g_ce) = cross_entropy(p.value("z_c").data(), y)?;
                        let (crm, g_crm) = crm_loss(p.value("z_o").data(), y, &w, lambda)?;
                        let (kd, g_kd) = kd_loss(&teacher, p.value("z_o").data(), tau, &head)?;
                        let (sc, g_sc) = semantic_gap_loss(p.value("s").data(), &t)?;
                        for (o, v) in g.get_mut("z_c").data_mut().iter_mut().zip(&g_ce) {
                            *o = alpha * v;
                        }
                        for ((o, a), b) in g.get_mut("z_o").data_mut().iter_mut().zip(&g_crm).zip(&g_kd) {
                            *o = (1.0 - alpha) * a + mu * b;
                        }
                        g.get_mut("s").data_mut().copy_from_slice(&g_sc);
                        let hybrid = alpha * ce + (1.0 - alpha) * crm;
                        Ok(total_loss(hybrid, sc, kd, mu))
                    },
                    &p,
                )
            })
            .collect()
    }

    pub fn scm_reports() -> Vec<GradCheckReport> {
        let mut out = Vec::new();
        let mut seed = 600;
        while out.len() < INSTANCES as usize {
            let n = 1 + out.len() % 4;
            let dim = 4 + out.len() % 13;
            let scene = ScmScene::random(seed, n, dim, 6, 4);
            seed += 1;
            if scene.relu_margin() < RELU_MARGIN {
                continue;
            }
            out.push(check(|p, g| scene.loss(p, g), &scene.params));
        }
        out
    }

    fn tiny_vocab(c: usize) -> PredicateVocabulary {
        // Predicates 1..=3 are heads; the rest are their tails.
        let mut counts = vec![0u64];
        let mut parent = vec![None];
        for p in 1..c {
            counts.push(if p <= 3 { 500 / p as u64 } else { 40 / p as u64 + 1 });
            parent.push(Some(if p <= 3 { p } else { (p - 1) % 3 + 1 }));
        }
        PredicateVocabulary {
            names: (0..c).map(|i| format!("p{i}")).collect(),
            train_counts: counts,
            parent_of: parent,
        }
    }

    fn tiny_image(r: &mut ChaCha8Rng, n: usize, fd: usize, objects: usize, c: usize) -> Vec<RelationInstance> {
        (0..n)
            .map(|_| RelationInstance {
                image_id: 0,
                subject_class: r.random_range(1..=objects),
                object_class: r.random_range(1..=objects),
                gt_predicate: r.random_range(1..c),
                subject_feature: random_vec(r, fd, 1.0),
                object_feature: random_vec(r, fd, 1.0),
                union_feature: random_vec(r, fd, 1.0),
                subject_label_dist: random_dist(r, objects + 1),
                object_label_dist: random_dist(r, objects + 1),
            })
            .collect()
    }

    /// Single-image training objective through the shared extractor, both
    /// decoders and the semantic module, checked on the parameters whose
    /// influence never passes through a detached term: extractor and both
    /// decoders without distillation, the fine decoder with it.
    pub fn model_reports() -> Vec<GradCheckReport> {
        (0..INSTANCES)
            .map(|seed| {
                let mut r = rng(700 + seed);
                let (fd, objects, c) = (4, 3, 7);
                let dims = ModelDims {
                    feature_dim: fd,
                    num_object_classes: objects,
                    num_predicates: c - 1,
                    hidden_dim: 6,
                    scm_dim: 8,
                };
                let n = 1 + seed as usize % 4;
                let image = tiny_image(&mut r, n, fd, objects, c);
                let slots = objects + 1;
                let prior = PriorBias::from_tensor(
                    Tensor::from_vec(&[slots, slots, c], random_vec(&mut r, slots * slots * c, 2.0))
                        .unwrap(),
                )
                .unwrap();
                let mut model = DualBranchModel::new(dims, prior, seed).unwrap();
                model.params.value_mut(sgght_core::scm::PROJ_W).unwrap().scale(PROJ_GAIN);
                let vocab = tiny_vocab(c);
                let with_kd = seed % 2 == 1;
                let mut cfg = TrainConfig {
                    disable_kd: !with_kd,
                    hidden_dim: 6,
                    scm_dim: 8,
                    ..TrainConfig::default()
                };
                cfg.schedule.head_threshold = 100;
                let k = cfg.schedule.k1 + 1 + seed as usize * 97;
                let checked: Vec<&str> = if with_kd {
                    vec!["dec.flb.w", "dec.flb.b"]
                } else {
                    vec!["ext.l1.w", "ext.l1.b", "ext.l2.w", "ext.l2.b", "dec.clb.w", "dec.clb.b", "dec.flb.w", "dec.flb.b"]
                };
                let mut sub = ParamStore::new();
                for name in &checked {
                    sub.insert(name, model.params.value(name).clone()).unwrap();
                }
                check(
                    |p, g| {
                        let mut m = model.clone();
                        for name in &checked {
                            *m.params.value_mut(name).unwrap() = p.value(name).clone();
                        }
                        let (l, full) = image_objective(&cfg, &vocab, &m, &image, k)?;
                        for name in &checked {
                            g.get_mut(name).add_assign(full.get(name).unwrap());
                        }
                        Ok(l)
                    },
                    &sub,
                )
            })
            .collect()
    }
}

pub mod pipeline {
    use std::path::{Path, PathBuf};
    use std::process::{Command, Output};

    pub const TINY_GENERATOR: &str = "num_object_classes=4\nnum_head_predicates=4\n\
        tails_per_head=2\nfeature_dim=8\nnum_train=600\nnum_test=120\nrelations_per_image=6\nseed=5\n";

    pub const TINY_TRAINING: &str = "k1=20\nk2=40\ntotal_iterations=80\nhead_threshold=40\n\
        hidden_dim=8\nscm_dim=8\nbatch_size=3\nlog_every=5\neval_every=40\nseed=2\n";

    pub fn sgght(args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sgght"))
            .args(args)
            .output()
            .expect("binary runs")
    }

    pub fn ok(args: &[&str]) {
        let out = sgght(args);
        assert!(
            out.status.success(),
            "sgght {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    pub struct Run {
        pub data: PathBuf,
        pub train: PathBuf,
        pub eval: PathBuf,
        pub report: PathBuf,
    }

    /// generate, train, eval and report into `root`.
    pub fn full_run(root: &Path, generator: &str, training: &str) -> Run {
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let gen_cfg = root.join("gen.cfg");
        let train_cfg = root.join("train.cfg");
        std::fs::write(&gen_cfg, generator).unwrap();
        std::fs::write(&train_cfg, training).unwrap();
        let run = Run {
            data: root.join("data"),
            train: root.join("train"),
            eval: root.join("eval.tsv"),
            report: root.join("report.tsv"),
        };
        ok(&["generate", "--config", &s(&gen_cfg), "--out", &s(&run.data)]);
        ok(&["train", "--config", &s(&train_cfg), "--data", &s(&run.data), "--out", &s(&run.train)]);
        ok(&[
            "eval",
            "--checkpoint",
            &s(&run.train.join("checkpoint.bin")),
            "--data",
            &s(&run.data),
            "--out",
            &s(&run.eval),
        ]);
        ok(&["report", "--log", &s(&run.train.join("train.log")), "--out", &s(&run.report)]);
        run
    }

    /// Every file under `dir`, relative path with contents, sorted.
    pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                    out.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }
}

/// Worst deviations under one random relation reordering:
/// `(|dl_sc|, max |d global token|, Z~ rows moved bit for bit)`.
pub fn permutation_trial(seed: u64, max_relations: usize) -> (f64, f64, bool) {
    use rand::seq::SliceRandom;
    let mut r = rng(seed);
    let n = r.random_range(1..=max_relations);
    let dim = r.random_range(4..=16);
    let scene = ScmScene::random(seed ^ 0x5eed, n, dim, 7, 5);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let a = scene.forward(&scene.params, false);
    let p = scene.permuted(&perm);
    let b = p.forward(&p.params, false);
    let d_sc = (a.l_sc - b.l_sc).abs();
    let ta = a.t_global.as_ref().unwrap();
    let tb = b.t_global.as_ref().unwrap();
    let d_token = a
        .s_global
        .iter()
        .zip(&b.s_global)
        .chain(ta.iter().zip(tb))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let rows_exact = perm.iter().enumerate().all(|(i, &pi)| {
        a.z_tilde.row(i).iter().map(|v| v.to_bits()).eq(b.z_tilde.row(pi).iter().map(|v| v.to_bits()))
    });
    (d_sc, d_token, rows_exact)
}
