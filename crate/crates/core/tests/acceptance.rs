use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use partialseg::compat_verifier::{check_compatibility, CompatCase, LossId, Verdict};
use partialseg::data::{
    decode_image_png, decode_label_png, encode_image_png, encode_label_png, generate_phantoms, partial_dataset,
    phantom_dataset, DatasetManifest, PartialPolicy, PhantomSpec, Split,
};
use partialseg::eval::{dice, evaluate_params, run_ablation, AblationRow};
use partialseg::label_model::{ChannelMask, ClassSet, ClassSpace, LabelVector, PartialLabelMap, SENTINEL};
use partialseg::losses::{
    compatible_ce_pixel, pairwise_compatible_loss, pairwise_loss_pixel, partial_ce_pixel, weak_label_ce_pixel,
    LossConfig, PairwisePrediction,
};
use partialseg::network::{BackboneConfig, Network};
use partialseg::pairing::{
    build_pairwise_target, make_dual_sample, split_full_labels, ConditionalLabels, ConditionalPair, ConditionalSample,
    ConditionalSet, PairSource, PairingConfig, Swap,
};
use partialseg::plane::Plane;
use partialseg::trainer::{batch_objective, history_csv, BatchElement, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes past the test harness's output capture so every line lands in the log.
fn report(id: &str, ok: bool, detail: impl AsRef<str>) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    writeln!(std::io::stdout().lock(), "[{id}] {verdict} {}", detail.as_ref()).unwrap();
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[test]
fn a1_compatibility_verdicts() {
    let t0 = Instant::now();
    let space = ClassSpace::with_classes(3).unwrap();
    let (ann_a, ann_b) = (ClassSet::single(0), ClassSet::single(1));
    let verdict = |loss| {
        let case = CompatCase::from_regimes(loss, space.clone(), 2, &ann_a, &ann_b).unwrap();
        assert_eq!((case.grid_step, case.tolerance), (0.01, 1e-9));
        check_compatibility(&case).unwrap().verdict
    };
    let weak = verdict(LossId::WeakCe);
    let compat = verdict(LossId::CompatibleCe);
    let full = {
        let all = space.all();
        let case = CompatCase::from_regimes(LossId::StandardCe, space.clone(), 2, &all, &all).unwrap();
        check_compatibility(&case).unwrap().verdict
    };
    let secs = t0.elapsed().as_secs_f64();
    let ok = weak == Verdict::Incompatible && compat == Verdict::Compatible && full == Verdict::Compatible && secs < 30.0;
    report(
        "A1",
        ok,
        format!("weak_ce {weak}, compatible_ce {compat}, full one-hot standard_ce {full}, {secs:.2}s (limit 30s)"),
    );
    assert!(ok);
}

#[test]
fn a2_pixel_loss_values() {
    let cfg = LossConfig::default();
    let nl = |x: f64| -x.ln();
    let cases: Vec<(&str, f64, f64)> = vec![
        (
            "compatible_ce unlabeled",
            compatible_ce_pixel(&[0.5, 0.9, 0.1], &[0.0; 3], &ChannelMask::from_bools(vec![true, false, false]), &cfg)
                .unwrap()
                .value,
            nl(1.0 - 0.5),
        ),
        (
            "compatible_ce labeled",
            compatible_ce_pixel(&[0.8, 0.1, 0.2], &[1.0, 0.0, 0.0], &ChannelMask::all(3), &cfg).unwrap().value,
            nl(0.8) + nl(1.0 - 0.1) + nl(1.0 - 0.2),
        ),
        (
            "pairwise exclusiveness",
            pairwise_loss_pixel(&[0.0, 0.0, 0.3, 0.5], &[0.0, 1.0], &ClassSet::single(0), &cfg).unwrap().value,
            nl(1.0 - 0.5),
        ),
        (
            "pairwise inclusiveness",
            pairwise_loss_pixel(&[0.0, 0.0, 0.2, 0.7], &[0.0, 0.0], &ClassSet::single(0), &cfg).unwrap().value,
            nl(1.0 - 0.2),
        ),
        (
            "weak_label_ce at its target",
            weak_label_ce_pixel(
                &[0.0, 0.5, 0.5],
                &LabelVector::from_values(vec![0.0, 0.5, 0.5], partialseg::label_model::LabelKind::Weak).unwrap(),
                &cfg,
            )
            .unwrap(),
            0.5 * nl(0.5) + 0.5 * nl(0.5),
        ),
        ("partial_ce", partial_ce_pixel(&[0.5, 0.25, 0.25], 1, &cfg).unwrap(), nl(0.25)),
    ];
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for (name, got, want) in &cases {
        let err = (got - want).abs();
        worst = worst.max(err);
        if err > 1e-6 {
            ok = false;
            report("A2", false, format!("{name}: got {got}, oracle {want}"));
        }
    }
    report("A2", ok, format!("{} pixel-loss values, max abs error {worst:.2e} (limit 1e-6)", cases.len()));
    assert!(ok);
}

fn random_interior(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0.02..0.98)).collect()
}

fn random_bits(r: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| r.random_bool(p)).collect()
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn fd_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let dn = f(&y);
            y[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y, floor)).fold(0.0, f64::max)
}

fn random_partial_map(r: &mut ChaCha8Rng, h: usize, w: usize, m: usize) -> PartialLabelMap {
    let mut annotated: ClassSet = (0..m).filter(|_| r.random_bool(0.4)).collect();
    if annotated.is_empty() {
        annotated.insert(r.random_range(0..m));
    }
    let labels = (0..h * w)
        .map(|_| {
            let c = r.random_range(0..m);
            if annotated.contains(c) {
                c as u8
            } else {
                SENTINEL
            }
        })
        .collect();
    PartialLabelMap::new(h, w, labels, annotated).unwrap()
}

fn random_cond_labels(r: &mut ChaCha8Rng, m: usize, k: usize) -> ConditionalLabels {
    let masks = (0..m)
        .map(|_| r.random_bool(0.8).then(|| random_bits(r, k, 0.4)))
        .collect();
    ConditionalLabels::from_masks(m, k, masks).unwrap()
}

#[test]
fn a3_gradient_checks() {
    let cfg = LossConfig::default();
    let h = 1e-5;
    let mut r = rng(3);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        // compatible cross-entropy in plain or pairwise mode
        let n = if r.random_bool(0.5) { 3 } else { 8 };
        let pred = random_interior(&mut r, n);
        let target: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(0.3)))).collect();
        let mut known = random_bits(&mut r, n, 0.6);
        known[0] = true;
        let known = ChannelMask::from_bools(known);
        let an = compatible_ce_pixel(&pred, &target, &known, &cfg).unwrap().grad;
        let fd = fd_grad(&pred, h, |p| compatible_ce_pixel(p, &target, &known, &cfg).unwrap().value);
        worst[0] = worst[0].max(max_rel(&an, &fd, 1e-8));

        // pairwise inclusiveness/exclusiveness, m = 4
        let pred = random_interior(&mut r, 8);
        let cond: Vec<f64> = (0..4).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
        let annotated: ClassSet = (0..4).filter(|_| r.random_bool(0.3)).collect();
        let an = pairwise_loss_pixel(&pred, &cond, &annotated, &cfg).unwrap().grad;
        let fd = fd_grad(&pred, h, |p| pairwise_loss_pixel(p, &cond, &annotated, &cfg).unwrap().value);
        worst[1] = worst[1].max(max_rel(&an, &fd, 1e-8));

        // image-level loss, 3x3 with m = 3
        let target_map = random_partial_map(&mut r, 3, 3, 3);
        let cond = random_cond_labels(&mut r, 3, 9);
        let target = build_pairwise_target(&target_map, &cond).unwrap();
        let probs = random_interior(&mut r, 6 * 9);
        let loss = |p: &[f64]| {
            let pred = PairwisePrediction::new(3, 3, 3, p.to_vec()).unwrap();
            pairwise_compatible_loss(&pred, &target, &cond, &cfg).unwrap()
        };
        let an = loss(&probs).grad;
        let fd = fd_grad(&probs, h, |p| loss(p).total);
        worst[2] = worst[2].max(max_rel(&an, &fd, 1e-8));
    }
    let names = ["compatible_ce_pixel", "pairwise_loss_pixel", "pairwise_compatible_loss"];
    let mut ok = true;
    for (name, w) in names.iter().zip(worst) {
        let pass = w <= 1e-4;
        ok &= pass;
        report("A3", pass, format!("{name}: 100 random interior points, max relative error {w:.2e} (limit 1e-4)"));
    }

    // full stage-2 objective on a micro network
    let backbone = BackboneConfig {
        m: 2,
        conditional_classes: vec![1],
        depth: 1,
        base_filters: 1,
        height: 6,
        width: 6,
    };
    let net = Network::new(backbone.clone()).unwrap();
    let tcfg = TrainConfig {
        backbone,
        pairing: PairingConfig {
            conditional_classes: vec![1],
            exclude_target: true,
        },
        ..TrainConfig::default()
    };
    // zero-initialized biases put ReLUs exactly on their kinks; move to a generic point
    let theta_p: Vec<f64> = net.init_params(11).values.iter().map(|v| v + r.random_range(-0.05..0.05)).collect();
    let theta_d = net.init_params(12).values;
    let k = 36;
    let batch: Vec<BatchElement> = (0..2)
        .map(|e| {
            let mask = random_bits(&mut r, k, 0.4);
            let image = Plane::new(6, 6, (0..k).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let cond_image = Plane::new(6, 6, (0..k).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let cond_mask = random_bits(&mut r, k, 0.5);
            let cond = ConditionalSet::new(vec![ConditionalPair {
                class_id: 1,
                image: cond_image,
                mask: Plane::from_mask(6, 6, &cond_mask).unwrap(),
                source: PairSource::Sample(10 + e),
            }])
            .unwrap();
            BatchElement {
                sample: ConditionalSample {
                    target_id: Some(e),
                    image,
                    labels: PartialLabelMap::from_class_mask(6, 6, &mask, 1).unwrap(),
                    cond,
                },
                swap: Swap::Random,
                swap_seed: 100 + e as u64,
            }
        })
        .collect();
    let lambda = 0.2;
    let objective =
        |p: &[f64]| batch_objective::<f64>(&net, &tcfg, p, Some(&theta_d), lambda, &batch, false).unwrap().0.total;
    let (_, an) = batch_objective::<f64>(&net, &tcfg, &theta_p, Some(&theta_d), lambda, &batch, true).unwrap();
    let (_, an_prim) = batch_objective::<f64>(&net, &tcfg, &theta_p, Some(&theta_d), 0.0, &batch, true).unwrap();
    let fd = fd_grad(&theta_p, h, objective);
    let w = max_rel(&an, &fd, 1e-6);
    let dual_share = an.iter().zip(&an_prim).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pass = w <= 1e-3 && net.n_params() < 100 && dual_share > 1e-6;
    ok &= pass;
    report(
        "A3",
        pass,
        format!(
            "stage-2 objective, {}-parameter network: max relative error {w:.2e} (limit 1e-3), dual-path gradient magnitude {dual_share:.2e}",
            net.n_params()
        ),
    );
    assert!(ok);
}

#[test]
fn a4_pairwise_target_oracle() {
    let mut r = rng(4);
    let (m, k) = (4, 256);
    let mut failures = 0;
    for _ in 0..1000 {
        let target = random_partial_map(&mut r, 16, 16, m);
        let cond = random_cond_labels(&mut r, m, k);
        let t = build_pairwise_target(&target, &cond).unwrap();
        let mut good = true;
        for c in 0..m {
            let annotated = target.annotated().contains(c);
            for i in 0..k {
                let in_t = target.labels()[i] == c as u8;
                let in_c = cond.get(c, i);
                let (inter, extra) = (t.inter(c)[i], t.extra(c)[i]);
                good &= inter == (in_t && in_c);
                good &= extra == (in_t && !in_c);
                good &= !(inter && extra);
                good &= (inter || extra) == in_t;
                let known = annotated || target.labels()[i] != SENTINEL;
                good &= t.is_known(2 * c, i) == known && t.is_known(2 * c + 1, i) == known;
            }
        }
        failures += usize::from(!good);
    }
    report("A4", failures == 0, format!("1000 random 16x16 mask pairs (m=4), {failures} mismatches"));
    assert_eq!(failures, 0);
}

fn random_plane(r: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::new(h, w, (0..h * w).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

fn bits(p: &Plane) -> Vec<u64> {
    p.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn a5_dual_sample_invariants() {
    let mut r = rng(5);
    let (h, w, m) = (5, 4, 4);
    let k = h * w;
    let mut failures = 0;
    for case in 0..1000 {
        let mut classes = vec![1, 2, 3];
        if r.random_bool(0.3) {
            classes.insert(0, 0);
        }
        let slots: Vec<ConditionalPair> = classes
            .iter()
            .enumerate()
            .map(|(j, &c)| ConditionalPair {
                class_id: c,
                image: random_plane(&mut r, h, w),
                mask: Plane::from_mask(h, w, &random_bits(&mut r, k, 0.5)).unwrap(),
                source: PairSource::Sample(100 + j),
            })
            .collect();
        let primal = ConditionalSample {
            target_id: Some(case),
            image: random_plane(&mut r, h, w),
            labels: PartialLabelMap::from_class_mask(h, w, &random_bits(&mut r, k, 0.3), 2).unwrap(),
            cond: ConditionalSet::new(slots.clone()).unwrap(),
        };
        let pred = PairwisePrediction::new(m, h, w, (0..2 * m * k).map(|_| r.random::<f64>()).collect()).unwrap();
        let swap = if r.random_bool(0.5) {
            Swap::Class(classes[r.random_range(0..classes.len())])
        } else {
            Swap::Random
        };
        let d = make_dual_sample(&primal, &pred, swap, &mut r).unwrap();
        let s = d.swap_slot;
        let mut good = slots[s].class_id == d.swap_class;
        if let Swap::Class(c) = swap {
            good &= d.swap_class == c;
        }
        // dual target is the swapped conditional pair
        good &= bits(&d.dual.image) == bits(&slots[s].image);
        let mask: Vec<bool> = slots[s].mask.data().iter().map(|&v| v == 1.0).collect();
        good &= d.dual.labels.annotated() == &ClassSet::single(d.swap_class);
        good &= (0..k).all(|i| d.dual.labels.labels()[i] == if mask[i] { d.swap_class as u8 } else { SENTINEL });
        // pseudo pair sits in the swapped slot, everything else untouched
        let c = d.swap_class;
        let oracle: Vec<f64> = (0..k).map(|i| (pred.get(2 * c, i) + pred.get(2 * c + 1, i)).min(1.0)).collect();
        good &= d.pseudo_label.data() == oracle.as_slice();
        let ds = d.dual.cond.slots();
        good &= ds.len() == slots.len();
        good &= ds[s].class_id == c && bits(&ds[s].image) == bits(&primal.image) && ds[s].mask.data() == oracle.as_slice();
        for (j, (a, b)) in slots.iter().zip(ds).enumerate() {
            if j != s {
                good &= a == b;
            }
        }
        // multiset of images is preserved: {target} + conditionals
        let mut before: Vec<Vec<u64>> = slots.iter().map(|p| bits(&p.image)).collect();
        before.push(bits(&primal.image));
        let mut after: Vec<Vec<u64>> = ds.iter().map(|p| bits(&p.image)).collect();
        after.push(bits(&d.dual.image));
        before.sort();
        after.sort();
        good &= before == after;
        good &= d.primal == primal;
        failures += usize::from(!good);
    }
    report("A5", failures == 0, format!("1000 random dual constructions, {failures} invariant violations"));
    assert_eq!(failures, 0);
}

fn small_setup(n: usize, test_count: usize) -> (partialseg::data::Dataset, TrainConfig) {
    let spec = PhantomSpec {
        seed: 21,
        test_count,
        ..PhantomSpec::default()
    };
    let full = phantom_dataset(&spec, n).unwrap();
    let ds = partial_dataset(&full, PartialPolicy::OneLabelRoundRobin, 0).unwrap();
    let cfg = TrainConfig {
        backbone: BackboneConfig {
            depth: 2,
            base_filters: 4,
            ..BackboneConfig::toy(4)
        },
        batch_size: 2,
        stage1_epochs: 1,
        seed: 5,
        ..TrainConfig::default()
    };
    (ds, cfg)
}

#[test]
fn a6_algorithm_mechanics() {
    let (ds, base) = small_setup(12, 0);

    // lambda = 0 stage 2 against plain primal updates on the same batches
    let cfg = TrainConfig {
        lambda_dual: 0.0,
        stage2_max_steps: 50,
        converge_eps: 1e-300,
        ..base.clone()
    };
    let tr = Trainer::new(cfg, &ds).unwrap();
    let s1 = tr.train_stage1(tr.init_state()).unwrap();
    let a = tr.train_stage2(s1.clone()).unwrap();
    let b = tr.continue_primal(s1.clone(), 50).unwrap();
    let same_params = a.theta_p.values.iter().zip(&b.theta_p.values).all(|(x, y)| x.to_bits() == y.to_bits());
    let same_history = history_csv(&a.history) == history_csv(&b.history);
    let pass1 = same_params && same_history && a.step - s1.step == 50;
    report(
        "A6",
        pass1,
        format!("lambda=0 stage 2 vs primal-only updates over {} steps: bitwise params {same_params}, history {same_history}", a.step - s1.step),
    );

    // theta_D equals theta_P right after every sync, and stays frozen in between
    let mut pass2 = true;
    let mut checked = 0;
    for sync_every in [1, 3] {
        let cfg = TrainConfig {
            stage2_max_steps: 12,
            sync_every,
            converge_eps: 1e-300,
            ..base.clone()
        };
        let tr = Trainer::new(cfg, &ds).unwrap();
        let mut last_sync: Option<Vec<u64>> = None;
        let s2 = tr
            .train_stage2_observed(s1.clone(), |state, theta_d, synced| {
                let d: Vec<u64> = theta_d.values.iter().map(|v| v.to_bits()).collect();
                if synced {
                    let p: Vec<u64> = state.theta_p.values.iter().map(|v| v.to_bits()).collect();
                    pass2 &= d == p;
                    last_sync = Some(d);
                } else {
                    pass2 &= last_sync.as_ref() == Some(&d);
                }
                checked += 1;
            })
            .unwrap();
        pass2 &= s2.syncs.len() == 12usize.div_ceil(sync_every);
    }
    report("A6", pass2, format!("theta_D == theta_P after every sync (sync_every 1 and 3, {checked} steps observed)"));

    // infinite tolerance stops after one update
    let cfg = TrainConfig {
        converge_eps: f64::INFINITY,
        stage2_max_steps: 50,
        ..base
    };
    let tr = Trainer::new(cfg, &ds).unwrap();
    let s2 = tr.train_stage2(s1.clone()).unwrap();
    let pass3 = s2.converged && s2.step - s1.step == 1;
    report("A6", pass3, format!("converge_eps=inf exits after {} step(s)", s2.step - s1.step));
    assert!(pass1 && pass2 && pass3);
}

#[test]
fn a7_toy_ablation_trend() {
    let t0 = Instant::now();
    let spec = PhantomSpec {
        test_count: 40,
        seed: 1,
        ..PhantomSpec::default()
    };
    let full = phantom_dataset(&spec, 240).unwrap();
    let ds = partial_dataset(&full, PartialPolicy::OneLabelRoundRobin, 0).unwrap();
    assert_eq!((ds.ids(Split::Train).len(), ds.ids(Split::Test).len()), (200, 40));
    assert!(ds.ids(Split::Train).iter().all(|&i| ds.sample(i).labels.annotated().len() == 1));
    let cfg = TrainConfig::default();
    let rows: Vec<AblationRow> = ["baseline", "cond+cce", "cond+cce+p", "full"]
        .iter()
        .map(|r| AblationRow::parse(r).unwrap())
        .collect();
    let table = run_ablation(&ds, &cfg, &rows, 7, None).unwrap();
    let d = |name: &str| table.get(name).unwrap().report.mean_dice;
    let (base, cce, p, full) = (d("baseline"), d("cond+cce"), d("cond+cce+p"), d("full"));
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    writeln!(std::io::stdout().lock(), "{}", table.markdown()).unwrap();
    let checks = [
        (full >= p - 0.01, format!("full {full:.4} >= without L_dual {p:.4} - 0.01")),
        (p >= cce - 0.01, format!("without L_dual {p:.4} >= cond+L_cce {cce:.4} - 0.01")),
        (cce >= base - 0.01, format!("cond+L_cce {cce:.4} >= baseline {base:.4} - 0.01")),
        (full - base >= 0.05, format!("full - baseline = {:.4} >= 0.05", full - base)),
        (full >= 0.85, format!("full {full:.4} >= 0.85")),
        (mins <= 240.0, format!("runtime {mins:.1} min <= 240 min (CPU)")),
    ];
    for (ok, what) in &checks {
        report("A7", *ok, what);
    }
    assert!(checks.iter().all(|(ok, _)| *ok));
}

#[test]
fn a8_full_label_adaptation() {
    let spec = PhantomSpec { seed: 8, ..PhantomSpec::default() };
    let ds = phantom_dataset(&spec, 101).unwrap();
    let m = 4;
    let mut failures = 0;
    for id in 0..100 {
        let full = &ds.sample(id).labels;
        let k = full.len();
        let split = split_full_labels(full, m).unwrap();
        for pairing in [id, id + 1] {
            let other = &ds.sample(pairing).labels;
            let cond = ConditionalLabels::from_masks(m, k, (0..m).map(|c| Some(other.class_mask(c))).collect()).unwrap();
            let direct = build_pairwise_target(full, &cond).unwrap();
            for (c, one) in split.iter().enumerate() {
                let t = build_pairwise_target(one, &cond).unwrap();
                let mut good = t.inter(c) == direct.inter(c) && t.extra(c) == direct.extra(c);
                if pairing == id {
                    good &= t.inter(c) == full.class_mask(c).as_slice() && t.extra(c).iter().all(|&v| !v);
                }
                failures += usize::from(!good);
            }
        }
    }
    report(
        "A8",
        failures == 0,
        format!("100 phantoms, split one-label targets vs direct full-label pairing (self and cross pairs): {failures} mismatches"),
    );
    assert_eq!(failures, 0);
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn a9_determinism_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = PhantomSpec {
        test_count: 4,
        seed: 9,
        ..PhantomSpec::default()
    };
    generate_phantoms(&spec, 12, &tmp.path().join("a")).unwrap();
    generate_phantoms(&spec, 12, &tmp.path().join("b")).unwrap();
    let (ta, tb) = (tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")));
    let gen_ok = ta == tb && ta.len() == 25;
    report("A9", gen_ok, format!("dataset generation: {} files byte-identical across two runs", ta.len()));

    let (ds, cfg) = small_setup(12, 2);
    let run = || {
        let tr = Trainer::new(TrainConfig { stage2_max_steps: 5, ..cfg.clone() }, &ds).unwrap();
        let s = tr.train_stage2(tr.train_stage1(tr.init_state()).unwrap()).unwrap();
        let report = evaluate_params(tr.network(), &s.theta_p, true, &ds, Split::Test, 3).unwrap();
        (history_csv(&s.history), serde_json::to_vec(&report).unwrap())
    };
    let (h1, r1) = run();
    let (h2, r2) = run();
    let train_ok = h1 == h2 && h1.lines().count() > 1;
    let eval_ok = r1 == r2;
    report("A9", train_ok, format!("training history ({} records) byte-identical across two runs", h1.lines().count() - 1));
    report("A9", eval_ok, "evaluation report byte-identical across two runs");

    let manifest = DatasetManifest::load(&tmp.path().join("a/manifest.json")).unwrap();
    let mut png_ok = true;
    let mut r = rng(9);
    for _ in 0..20 {
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let img = Plane::new(h, w, (0..h * w).map(|_| f64::from(r.random::<u16>()) / 65535.0).collect()).unwrap();
        let back = decode_image_png(&encode_image_png(&img).unwrap(), Path::new("mem")).unwrap();
        png_ok &= bits(&back) == bits(&img);
        let labels: Vec<u8> = (0..h * w)
            .map(|_| if r.random_bool(0.2) { SENTINEL } else { r.random_range(0..4) })
            .collect();
        let (lh, lw, back) = decode_label_png(&encode_label_png(w, h, &labels).unwrap(), Path::new("mem")).unwrap();
        png_ok &= (lw, lh) == (w, h) && back == labels;
    }
    manifest.save(&tmp.path().join("copy.json")).unwrap();
    let again = DatasetManifest::load(&tmp.path().join("copy.json")).unwrap();
    let manifest_ok = again == manifest
        && std::fs::read(tmp.path().join("copy.json")).unwrap() == std::fs::read(tmp.path().join("a/manifest.json")).unwrap();
    report("A9", png_ok, "16-bit image and indexed label PNG round trips bit-exact (20 random each)");
    report("A9", manifest_ok, "manifest save/load round trip bit-exact");
    assert!(gen_ok && train_ok && eval_ok && png_ok && manifest_ok);
}

#[test]
fn a10_dice_oracle() {
    let mut r = rng(10);
    let mut failures = 0;
    let mut both_empty = 0;
    for case in 0..1000 {
        let n = r.random_range(1..300);
        let (pa, pb) = match case % 10 {
            0 => (0.0, 0.0),
            1 => (0.0, 0.3),
            _ => (r.random::<f64>(), r.random::<f64>()),
        };
        let a = random_bits(&mut r, n, pa);
        let b = random_bits(&mut r, n, pb);
        let mut inter = 0u64;
        let mut size = 0u64;
        for i in 0..n {
            if a[i] && b[i] {
                inter += 1;
            }
            if a[i] {
                size += 1;
            }
            if b[i] {
                size += 1;
            }
        }
        let oracle = if size == 0 {
            both_empty += 1;
            1.0
        } else {
            2.0 * inter as f64 / size as f64
        };
        let got = dice(&a, &b).unwrap();
        failures += usize::from(got.to_bits() != oracle.to_bits() || dice(&b, &a).unwrap().to_bits() != got.to_bits());
    }
    report(
        "A10",
        failures == 0 && both_empty > 0,
        format!("1000 random mask pairs ({both_empty} both empty), {failures} mismatches against the pixel-count oracle"),
    );
    assert!(failures == 0 && both_empty > 0);
}
