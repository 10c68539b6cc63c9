//! Few-shot continual-learning orchestration: disjoint class splits,
//! k-shot sampling, per-session evaluation, and the metric suite
//! (target improvement, control change, average accuracy, backward
//! transfer).

use crate::adapt::Strategy;
use crate::dataio::{Dataset, Sample};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::train::{train_session, SessionLog, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ── Splits ───────────────────────────────────────────────────────────

/// One continual-learning session: its disjoint class set, the k-shot
/// training refs and the held-out test refs (indices into the dataset).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSplit {
    pub session_id: usize,
    pub classes: Vec<usize>,
    pub train_refs: Vec<usize>,
    pub test_refs: Vec<usize>,
}

/// Partition classes into `sessions` near-equal disjoint groups (seeded
/// shuffle) and sample `shots` training images per class without
/// replacement; the rest of each class becomes its test split.
pub fn make_splits(
    dataset: &Dataset,
    sessions: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<SessionSplit>> {
    let classes = dataset.num_classes();
    if sessions == 0 || classes < sessions {
        return Err(Error::Input(format!(
            "cannot split {classes} classes into {sessions} sessions"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        per_class[s.class as usize].push(i);
    }
    for (c, refs) in per_class.iter().enumerate() {
        if refs.len() < shots {
            return Err(Error::Input(format!(
                "class {c} ('{}') has {} samples, fewer than {shots} shots",
                dataset.class_captions[c],
                refs.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);

    let base = classes / sessions;
    let extra = classes % sessions;
    let mut splits = Vec::with_capacity(sessions);
    let mut cursor = 0;
    for t in 0..sessions {
        let take = base + usize::from(t < extra);
        let mut group: Vec<usize> = class_order[cursor..cursor + take].to_vec();
        cursor += take;
        group.sort_unstable();
        let mut train_refs = Vec::new();
        let mut test_refs = Vec::new();
        for &c in &group {
            let mut refs = per_class[c].clone();
            refs.shuffle(&mut rng);
            train_refs.extend_from_slice(&refs[..shots]);
            test_refs.extend_from_slice(&refs[shots..]);
        }
        train_refs.sort_unstable();
        test_refs.sort_unstable();
        splits.push(SessionSplit { session_id: t + 1, classes: group, train_refs, test_refs });
    }
    debug_assert!(class_sets_disjoint(&splits));
    Ok(splits)
}

fn class_sets_disjoint(splits: &[SessionSplit]) -> bool {
    let mut seen = std::collections::HashSet::new();
    for s in splits {
        for &c in &s.classes {
            if !seen.insert(c) {
                return false;
            }
        }
    }
    true
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Zero-shot classification accuracy of `refs` against the prompt set.
pub fn evaluate_accuracy(
    model: &DualEncoder,
    dataset: &Dataset,
    refs: &[usize],
    prompts: &[Vec<u16>],
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Input("evaluation over an empty test split".into()));
    }
    let mut correct = 0usize;
    for &i in refs {
        let s = &dataset.samples[i];
        let pred = model.zero_shot_classify(&s.image, prompts)?;
        if pred == s.class as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / refs.len() as f64)
}

/// A control dataset with the refs reserved for evaluation.
#[derive(Debug, Clone)]
pub struct ControlEval {
    pub name: String,
    pub dataset: Dataset,
    pub eval_refs: Vec<usize>,
}

impl ControlEval {
    /// Evaluate on every sample of the dataset.
    pub fn whole(name: impl Into<String>, dataset: Dataset) -> Self {
        let eval_refs = (0..dataset.samples.len()).collect();
        ControlEval { name: name.into(), dataset, eval_refs }
    }
}

// ── Accuracy matrix and metrics ──────────────────────────────────────

/// Accuracies recorded across the run. `r[t][i]` is the accuracy on
/// session i+1's test split after training session t+1 (lower-triangular
/// rows). The zero-shot row is computed before any training and never
/// recomputed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyMatrix {
    pub r: Vec<Vec<f64>>,
    pub zero_shot_sessions: Vec<f64>,
    pub zero_shot_target: f64,
    pub final_target: f64,
    pub zero_shot_controls: Vec<f64>,
    pub final_controls: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn validate(&self) -> Result<()> {
        for (t, row) in self.r.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Schema(format!(
                    "row {t} of the accuracy matrix has {} entries, expected {}",
                    row.len(),
                    t + 1
                )));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Schema(format!("row {t} holds accuracies outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Target improvement in percentage points: final minus zero-shot
/// accuracy on the target test split.
pub fn metric_ti(final_target_acc: f64, zero_shot_target_acc: f64) -> f64 {
    (final_target_acc - zero_shot_target_acc) * 100.0
}

/// Control change in percentage points: mean accuracy change over the
/// control datasets.
pub fn metric_cc(control_final: &[f64], control_zero_shot: &[f64]) -> Result<f64> {
    if control_final.is_empty() || control_final.len() != control_zero_shot.len() {
        return Err(Error::Input(format!(
            "control change needs matched non-empty lists, got {} and {}",
            control_final.len(),
            control_zero_shot.len()
        )));
    }
    let sum: f64 = control_final.iter().zip(control_zero_shot).map(|(f, z)| f - z).sum();
    Ok(sum / control_final.len() as f64 * 100.0)
}

/// Average accuracy over the final row, and backward transfer: the mean
/// retrospective change on earlier sessions. Both on [0,1] accuracies.
pub fn metric_acc_bwt(r: &[Vec<f64>]) -> Result<(f64, f64)> {
    let t = r.len();
    if t < 2 {
        return Err(Error::Input(format!("backward transfer needs >= 2 sessions, got {t}")));
    }
    let last = &r[t - 1];
    if last.len() != t {
        return Err(Error::Schema(format!(
            "final row has {} entries, expected {t}",
            last.len()
        )));
    }
    let acc = last.iter().sum::<f64>() / t as f64;
    let mut bwt = 0.0;
    for i in 0..t - 1 {
        bwt += last[i] - r[i][i];
    }
    Ok((acc, bwt / (t - 1) as f64))
}

// ── Continual run ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinualConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub seed: u64,
}

/// Everything one seed's run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub ti: f64,
    pub cc: Option<f64>,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub trainable_coords: usize,
    #[serde(skip)]
    pub session_logs: Vec<SessionLog>,
}

/// Run the full continual protocol: a zero-shot row before any training,
/// one training session per split, per-session retrospective evaluation,
/// and control evaluation after the last session.
pub fn run_continual(
    model: &mut DualEncoder,
    strategy: &mut Strategy,
    dataset: &Dataset,
    splits: &[SessionSplit],
    controls: &[ControlEval],
    cfg: &ContinualConfig,
) -> Result<SeedOutcome> {
    if splits.is_empty() {
        return Err(Error::Input("continual run with no sessions".into()));
    }
    let prompts = dataset.all_class_prompts()?;
    let control_prompts: Vec<Vec<Vec<u16>>> =
        controls.iter().map(|c| c.dataset.all_class_prompts()).collect::<Result<_>>()?;

    let all_test: Vec<usize> = splits.iter().flat_map(|s| s.test_refs.iter().copied()).collect();

    // Zero-shot row: before any parameter mutation.
    let zero_shot_sessions: Vec<f64> = splits
        .iter()
        .map(|s| evaluate_accuracy(model, dataset, &s.test_refs, &prompts))
        .collect::<Result<_>>()?;
    let zero_shot_target = evaluate_accuracy(model, dataset, &all_test, &prompts)?;
    let zero_shot_controls: Vec<f64> = controls
        .iter()
        .zip(&control_prompts)
        .map(|(c, p)| evaluate_accuracy(model, &c.dataset, &c.eval_refs, p))
        .collect::<Result<_>>()?;

    let mut r: Vec<Vec<f64>> = Vec::with_capacity(splits.len());
    let mut session_logs = Vec::with_capacity(splits.len());
    let mut trainable_coords = 0;
    for (t, split) in splits.iter().enumerate() {
        let samples: Vec<&Sample> = split.train_refs.iter().map(|&i| &dataset.samples[i]).collect();
        let tc = TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            peak_lr: cfg.peak_lr,
            min_lr: 0.0,
            seed: cfg.seed.wrapping_add(t as u64),
        };
        let log = train_session(model, strategy, &samples, &tc)?;
        trainable_coords = trainable_coords.max(log.trainable_coords);
        session_logs.push(log);

        let mut row = Vec::with_capacity(t + 1);
        for earlier in &splits[..=t] {
            row.push(evaluate_accuracy(model, dataset, &earlier.test_refs, &prompts)?);
        }
        r.push(row);
    }

    let final_target = evaluate_accuracy(model, dataset, &all_test, &prompts)?;
    let final_controls: Vec<f64> = controls
        .iter()
        .zip(&control_prompts)
        .map(|(c, p)| evaluate_accuracy(model, &c.dataset, &c.eval_refs, p))
        .collect::<Result<_>>()?;

    let matrix = AccuracyMatrix {
        r,
        zero_shot_sessions,
        zero_shot_target,
        final_target,
        zero_shot_controls: zero_shot_controls.clone(),
        final_controls: final_controls.clone(),
    };
    matrix.validate()?;

    let ti = metric_ti(matrix.final_target, matrix.zero_shot_target);
    let cc = if controls.is_empty() {
        None
    } else {
        Some(metric_cc(&final_controls, &zero_shot_controls)?)
    };
    let (acc, bwt) = if splits.len() >= 2 {
        let (a, b) = metric_acc_bwt(&matrix.r)?;
        (a, Some(b))
    } else {
        (matrix.r[0][0], None)
    };

    Ok(SeedOutcome {
        seed: cfg.seed,
        matrix,
        ti,
        cc,
        acc,
        bwt,
        trainable_coords,
        session_logs,
    })
}

/// Mean and (population) standard deviation of a metric across seeds.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate, SyntheticSpec};
    use rand::Rng;

    fn tiny_dataset() -> Dataset {
        let mut spec = SyntheticSpec::new(10, 6, 5);
        spec.image_size = 8;
        generate(&spec).unwrap()
    }

    #[test]
    fn splits_partition_evenly_and_deterministically() {
        let ds = tiny_dataset();
        let a = make_splits(&ds, 5, 3, 17).unwrap();
        let b = make_splits(&ds, 5, 3, 17).unwrap();
        assert_eq!(
            a.iter().map(|s| s.classes.clone()).collect::<Vec<_>>(),
            b.iter().map(|s| s.classes.clone()).collect::<Vec<_>>()
        );
        assert_eq!(a.len(), 5);
        for s in &a {
            assert_eq!(s.classes.len(), 2);
            assert_eq!(s.train_refs.len(), 2 * 3);
            assert_eq!(s.test_refs.len(), 2 * 3);
        }
        let mut all: Vec<usize> = a.iter().flat_map(|s| s.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn splits_full_shot_takes_every_sample() {
        let ds = tiny_dataset();
        let splits = make_splits(&ds, 2, 6, 3).unwrap();
        for s in &splits {
            assert_eq!(s.train_refs.len(), s.classes.len() * 6);
            assert!(s.test_refs.is_empty());
        }
    }

    #[test]
    fn splits_error_names_class_with_too_few_samples() {
        let ds = tiny_dataset();
        let err = make_splits(&ds, 5, 7, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class 0"), "{msg}");
        assert!(make_splits(&ds, 11, 1, 1).is_err());
    }

    #[test]
    fn ti_and_cc_arithmetic() {
        assert_eq!(metric_ti(0.5, 0.5), 0.0);
        assert!((metric_ti(0.820, 0.756) - 6.4).abs() < 1e-9);
        assert_eq!(metric_cc(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let cc = metric_cc(&[0.51, 0.47], &[0.50, 0.50]).unwrap();
        assert!((cc - (-1.0)).abs() < 1e-9);
        assert!(metric_cc(&[], &[]).is_err());
        assert!(metric_cc(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn acc_bwt_known_matrix() {
        let r = vec![vec![0.8], vec![0.7, 0.9]];
        let (acc, bwt) = metric_acc_bwt(&r).unwrap();
        assert!((acc - 0.8).abs() < 1e-12);
        assert!((bwt - (-0.1)).abs() < 1e-12);
        assert!(metric_acc_bwt(&[vec![0.5]]).is_err());
    }

    #[test]
    fn acc_bwt_no_forgetting_is_zero() {
        let r = vec![vec![0.6], vec![0.6, 0.7], vec![0.6, 0.7, 0.8]];
        let (_, bwt) = metric_acc_bwt(&r).unwrap();
        assert_eq!(bwt, 0.0);
    }

    #[test]
    fn acc_bwt_matches_naive_loop_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let t = rng.gen_range(2..=6);
            let r: Vec<Vec<f64>> =
                (0..t).map(|row| (0..=row).map(|_| rng.gen::<f64>()).collect()).collect();
            let (acc, bwt) = metric_acc_bwt(&r).unwrap();
            let naive_acc: f64 = (0..t).map(|i| r[t - 1][i]).sum::<f64>() / t as f64;
            let naive_bwt: f64 =
                (0..t - 1).map(|i| r[t - 1][i] - r[i][i]).sum::<f64>() / (t - 1) as f64;
            assert!((acc - naive_acc).abs() < 1e-12);
            assert!((bwt - naive_bwt).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_recompute_from_stored_matrix() {
        let m = AccuracyMatrix {
            r: vec![vec![0.5], vec![0.4, 0.7]],
            zero_shot_sessions: vec![0.2, 0.25],
            zero_shot_target: 0.22,
            final_target: 0.55,
            zero_shot_controls: vec![0.8],
            final_controls: vec![0.79],
        };
        m.validate().unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: AccuracyMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            metric_ti(back.final_target, back.zero_shot_target),
            metric_ti(m.final_target, m.zero_shot_target)
        );
        assert_eq!(
            metric_cc(&back.final_controls, &back.zero_shot_controls).unwrap(),
            metric_cc(&m.final_controls, &m.zero_shot_controls).unwrap()
        );
    }
}
