//! The oracle-backed acceptance checks. Each returns a one-line summary on
//! success and a reason on failure.

use std::collections::BTreeMap;

use amodal_core::inference::{evaluate, nms, nms_indices, rescore, EvalConfig, InferenceOptions};
use amodal_core::mask::{mask_iou, Mask};
use amodal_core::shape_prior::kmeans::{kmeans, kmeans_plus_plus, KMeansInit, MAX_ITERATIONS};
use amodal_core::shape_prior::{build_codebook, mask_similarity, train_autoencoder, AutoencoderConfig, SimilarityNorm};
use amodal_core::synth::{default_templates, render_template, Placement};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ap_fixture, ap_oracle, det_of, gt_of, lloyd_oracle, nms_fixtures, nms_oracle, rect};

pub type Check = Result<String, String>;

const KMEANS_TOL: f64 = 1e-9;

/// Direct runs on random 2-D point sets, then `build_codebook` itself with a
/// 2-D embedding so its stored objective meets the oracle on the same data.
pub fn kmeans_matches_lloyd() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for trial in 0..200u64 {
        let n = rng.gen_range(1..=20);
        let k = rng.gen_range(1..=4usize).min(n);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
        let init = kmeans_plus_plus(&pts, k, &mut ChaCha8Rng::seed_from_u64(trial));
        let ours = kmeans(&pts, k, KMeansInit::PlusPlus { seed: trial }, MAX_ITERATIONS).map_err(|e| e.to_string())?;
        let given = kmeans(&pts, k, KMeansInit::Given(init.clone()), MAX_ITERATIONS).map_err(|e| e.to_string())?;
        let oracle = lloyd_oracle(&pts, &init, MAX_ITERATIONS);
        for got in [ours.objective(), given.objective()] {
            let err = (got - oracle).abs();
            worst = worst.max(err);
            if err > KMEANS_TOL {
                return Err(format!("trial {trial}: objective {got} vs oracle {oracle}"));
            }
        }
        runs += 1;
    }

    let templates = default_templates(2);
    let mut masks: BTreeMap<u32, Vec<Mask>> = BTreeMap::new();
    for i in 0..20 {
        let t = &templates[i % 2];
        let p = Placement { scale: 10.0 + (i % 5) as f64, rotation: 0.1 * i as f64, position: (32.0, 32.0) };
        let m = render_template(t, p, (64, 64)).map_err(|e| e.to_string())?;
        masks.entry(t.category_id).or_default().push(amodal_core::mask::resize_mask(&m, (28, 28)));
    }
    let all: Vec<Mask> = masks.values().flatten().cloned().collect();
    let cfg = AutoencoderConfig { dim: 2, epochs: 1, ..AutoencoderConfig::default() };
    let (ae, _) = train_autoencoder(&all, &cfg).map_err(|e| e.to_string())?;
    let seed = 5;
    let cb = build_codebook(ae, &masks, 4, seed).map_err(|e| e.to_string())?;
    for (cat, ms) in &masks {
        let emb: Vec<Vec<f64>> = ms.iter().map(|m| cb.autoencoder().encode(m).unwrap()).collect();
        let init = kmeans_plus_plus(&emb, 4, &mut ChaCha8Rng::seed_from_u64(seed ^ u64::from(*cat)));
        let oracle = lloyd_oracle(&emb, &init, MAX_ITERATIONS);
        let got = cb.meta().categories[cat].objective;
        let err = (got - oracle).abs();
        worst = worst.max(err);
        if err > KMEANS_TOL {
            return Err(format!("codebook category {cat}: objective {got} vs oracle {oracle}"));
        }
        runs += 1;
    }
    Ok(format!("{runs} runs, max |objective - oracle| = {worst:.1e}"))
}

pub fn ap_matches_greedy_oracle() -> Check {
    let (gts, dets) = ap_fixture();
    let cfg = EvalConfig::default();
    let report = evaluate(
        &[dets.iter().map(|(m, s)| det_of(m, *s)).collect()],
        &[gts.iter().map(gt_of).collect()],
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    let oracle = ap_oracle(&dets, &gts, &cfg.iou_thresholds);
    let at = |t: f64| ap_oracle(&dets, &gts, &[t]);
    let pairs = [(report.amodal.ap, oracle), (report.amodal.ap50, at(0.5)), (report.amodal.ap75, at(0.75))];
    for (got, want) in pairs {
        if (got - want).abs() > 1e-9 {
            return Err(format!("AP {got} vs oracle {want}"));
        }
    }
    Ok(format!("AP {:.6} = oracle {oracle:.6}, AP50 {:.6}, AP75 {:.6}", report.amodal.ap, pairs[1].1, pairs[2].1))
}

pub fn nms_matches_exhaustive_oracle() -> Check {
    let fixtures = nms_fixtures();
    let thr = InferenceOptions::default().nms_iou;
    for (i, (boxes, scores)) in fixtures.iter().enumerate() {
        let mut got = nms_indices(boxes, scores, thr);
        got.sort_unstable();
        let want = nms_oracle(boxes, scores, thr);
        if got != want {
            return Err(format!("fixture {i}: survivors {got:?} vs oracle {want:?}"));
        }
    }
    Ok(format!("{} five-box fixtures agree at IoU {thr}", fixtures.len()))
}

/// Two overlapping detections A (0.99) and B (0.97) whose masks sit 31 and 9
/// pixels away from their nearest prior on a 10×10 grid.
pub fn rescoring_flips_the_survivor() -> Check {
    let prior = rect(10, 10, 1, 1, 8, 8);
    // A: the prior with its bottom 3 rows cut plus a 7-pixel column on its left
    let a = Mask::from_fn(10, 10, |y, x| {
        let inside = (1..6).contains(&y) && (1..9).contains(&x);
        let stray = x == 0 && (1..8).contains(&y);
        (inside || stray) as u8 as f64
    });
    // B: the prior with its bottom row and one corner pixel trimmed
    let b = Mask::from_fn(10, 10, |y, x| ((1..8).contains(&y) && (1..9).contains(&x) && (y, x) != (1, 1)) as u8 as f64);
    let (sa, sb) = (mask_similarity(&a, &prior, SimilarityNorm::L1), mask_similarity(&b, &prior, SimilarityNorm::L1));
    if (sa - 0.69).abs() > 1e-12 || (sb - 0.91).abs() > 1e-12 {
        return Err(format!("fixture similarities {sa}, {sb}"));
    }
    if mask_iou(&b, &prior).unwrap() <= mask_iou(&a, &prior).unwrap() {
        return Err("B's mask must fit the object better than A's".into());
    }
    let (ra, rb) = (rescore(0.99, sa), rescore(0.97, sb));
    if (ra - 0.68).abs() > 0.005 || (rb - 0.88).abs() > 0.005 {
        return Err(format!("rescored A {ra:.4}, B {rb:.4}"));
    }
    let thr = InferenceOptions::default().nms_iou;
    let mut da = det_of(&a, 0.99);
    let mut db = det_of(&b, 0.97);
    if da.bbox.iou(&db.bbox) <= thr {
        return Err("A and B must overlap enough to compete in NMS".into());
    }
    let before = nms(&[da.clone(), db.clone()], thr);
    if before.len() != 1 || before[0].class_score != 0.99 {
        return Err("without rescoring A should suppress B".into());
    }
    da.class_score = ra;
    db.class_score = rb;
    let after = nms(&[da, db], thr);
    if after.len() != 1 || after[0].class_score != rb {
        return Err("with rescoring B should suppress A".into());
    }
    Ok(format!("A 0.99x{sa:.2} = {ra:.4}, B 0.97x{sb:.2} = {rb:.4}; B kept, A suppressed"))
}
