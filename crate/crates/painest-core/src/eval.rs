//! Evaluation protocols: leave-one-subject-out and 80/20 event splits,
//! validation carving, per-scope metrics, and fold drivers that either
//! train from scratch per fold or score existing weights.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;

use crate::bilinear::BilinearNet;
use crate::data::{clips_by_subject, ClipRecord, Phase};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::{derive_rng, tag};
use crate::temporal::IntensityLstm;
use crate::train::{
    fit, mae, mse, predict_sequence, FitReport, FrameScorer, FrameStore, SeqRef, Stage1Model,
    Stage2Model, StoreConfig, TrainConfig, Variant, FACIAL_RANGE,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

pub fn metrics(preds: &[f64], labels: &[f64]) -> Result<Metrics> {
    Ok(Metrics { mse: mse(preds, labels)?, mae: mae(preds, labels)?, count: preds.len() })
}

/// One evaluation fold: indices into the clip list.
#[derive(Debug, Clone)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per subject; the named subject's clips are the test set.
pub fn loso_folds(clips: &[ClipRecord]) -> Result<Vec<Fold>> {
    let by_subject = clips_by_subject(clips);
    if by_subject.len() < 2 {
        return Err(Error::Data(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            by_subject.len()
        )));
    }
    Ok(by_subject
        .iter()
        .map(|(subject, test)| {
            let train = clips
                .iter()
                .enumerate()
                .filter(|(_, c)| &c.subject_id != subject)
                .map(|(i, _)| i)
                .collect();
            Fold { name: subject.clone(), train, test: test.clone() }
        })
        .collect())
}

/// Seeded 80/20 event split (single fold named "split").
pub fn split_fold(n_clips: usize, seed: u64) -> Result<Fold> {
    if n_clips < 2 {
        return Err(Error::Data(format!("80/20 split needs at least 2 events, found {n_clips}")));
    }
    let mut order: Vec<usize> = (0..n_clips).collect();
    order.shuffle(&mut derive_rng(seed, &[tag("split")]));
    let n_train = ((0.8 * n_clips as f64).round() as usize).clamp(1, n_clips - 1);
    let (train, test) = order.split_at(n_train);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok(Fold { name: "split".into(), train, test })
}

/// Carve a validation subset out of a training fold: roughly 10% of each
/// subject's clips (at least one when the subject has two or more), seeded.
pub fn carve_val(train: &[usize], clips: &[ClipRecord], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in train {
        by_subject.entry(clips[i].subject_id.as_str()).or_default().push(i);
    }
    let mut kept = Vec::new();
    let mut val = Vec::new();
    for (si, (_, mut members)) in by_subject.into_iter().enumerate() {
        let n = members.len();
        let k = if n < 2 { 0 } else { ((0.1 * n as f64).round() as usize).max(1) };
        members.shuffle(&mut derive_rng(seed, &[tag("val"), si as u64]));
        val.extend_from_slice(&members[..k]);
        kept.extend_from_slice(&members[k..]);
    }
    kept.sort_unstable();
    val.sort_unstable();
    (kept, val)
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub fold: String,
    /// "frame" (stage 1), "step" (per-timestep), or "event" (per-event mean).
    pub scope: &'static str,
    pub metrics: Metrics,
}

pub fn metrics_tsv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("fold\tscope\tmse\tmae\tcount\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{}\n",
            r.fold, r.scope, r.metrics.mse, r.metrics.mae, r.metrics.count
        ));
    }
    out
}

/// Unweighted mean over folds, one row per scope (fold name "mean").
pub fn aggregate(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut scopes: Vec<&'static str> = Vec::new();
    for r in rows {
        if !scopes.contains(&r.scope) {
            scopes.push(r.scope);
        }
    }
    scopes
        .into_iter()
        .map(|scope| {
            let fold_rows: Vec<&MetricsRow> = rows.iter().filter(|r| r.scope == scope).collect();
            let n = fold_rows.len() as f64;
            MetricsRow {
                fold: "mean".into(),
                scope,
                metrics: Metrics {
                    mse: fold_rows.iter().map(|r| r.metrics.mse).sum::<f64>() / n,
                    mae: fold_rows.iter().map(|r| r.metrics.mae).sum::<f64>() / n,
                    count: fold_rows.iter().map(|r| r.metrics.count).sum(),
                },
            }
        })
        .collect()
}

/// Frame-scope metrics for a set of events under a frame scorer.
pub fn score_frames<M: FrameScorer>(
    net: &M,
    store: &FrameStore,
    events: &[(usize, f64)],
) -> Result<Metrics> {
    let mut rng = derive_rng(0, &[tag("eval")]);
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    crate::tensor::no_grad(|| -> Result<()> {
        for &(slot, label) in events {
            for frame in 0..store.n_frames(slot) {
                let (xs, start) = store.inputs(slot, frame, None)?;
                let score = net.score_streams(&xs, start, Mode::Eval, &mut rng)?;
                preds.push(score.clamp(FACIAL_RANGE.0, FACIAL_RANGE.1).item());
                labels.push(label);
            }
        }
        Ok(())
    })?;
    metrics(&preds, &labels)
}

/// Step- and event-scope metrics for a set of events under the sequence
/// model. Labels repeat per timestep for the step scope.
pub fn score_sequences(
    lstm: &IntensityLstm,
    net: &BilinearNet,
    store: &FrameStore,
    events: &[(usize, f64)],
) -> Result<(Metrics, Metrics)> {
    let (mut step_p, mut step_l) = (Vec::new(), Vec::new());
    let (mut ev_p, mut ev_l) = (Vec::new(), Vec::new());
    for &(slot, label) in events {
        let preds = predict_sequence(lstm, net, store, slot)?;
        ev_p.push(preds.iter().sum::<f64>() / preds.len() as f64);
        ev_l.push(label);
        step_l.extend(std::iter::repeat(label).take(preds.len()));
        step_p.extend(preds);
    }
    Ok((metrics(&step_p, &step_l)?, metrics(&ev_p, &ev_l)?))
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub seed: u64,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub store: StoreConfig,
    pub joint: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 42,
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            store: StoreConfig::default(),
            joint: false,
        }
    }
}

fn postop_events(clips: &[ClipRecord], idx: &[usize]) -> Vec<SeqRef> {
    idx.iter()
        .filter(|&&i| clips[i].phase == Phase::Postoperative)
        .map(|&i| SeqRef { slot: i, label: clips[i].npass as f64 })
        .collect()
}

fn facial_events(clips: &[ClipRecord], idx: &[usize]) -> Vec<(usize, f64)> {
    idx.iter().map(|&i| (i, clips[i].facial_label())).collect()
}

/// Train both stages on one fold and score its test set. Returns the three
/// scope rows plus the stage histories (frame training first).
pub fn eval_fold_trained(
    clips: &[ClipRecord],
    fold: &Fold,
    cfg: &EvalConfig,
) -> Result<(Vec<MetricsRow>, FitReport, FitReport)> {
    let (train_idx, val_idx) = carve_val(&fold.train, clips, cfg.seed);
    if val_idx.is_empty() {
        return Err(Error::Data(format!(
            "fold {}: validation carve is empty (every training subject has a single clip)",
            fold.name
        )));
    }
    let variants: Vec<Variant> = (0..clips.len())
        .map(|i| if train_idx.contains(&i) { Variant::Augmented } else { Variant::Clean })
        .collect();
    let net = BilinearNet::init(cfg.seed, Default::default());
    net.set_freeze_prefix(cfg.stage1.freeze_prefix);
    let store = {
        let streams = [&net.stream_a, &net.stream_b];
        Rc::new(FrameStore::build(&streams, clips, &variants, cfg.store.clone())?)
    };

    let mut stage1 = Stage1Model::new(
        net,
        store.clone(),
        &facial_events(clips, &train_idx),
        &facial_events(clips, &val_idx),
    );
    let report1 = fit(&mut stage1, &cfg.stage1)?;
    let net = stage1.net;

    let s2_train = postop_events(clips, &train_idx);
    let s2_val = postop_events(clips, &val_idx);
    if s2_train.is_empty() || s2_val.is_empty() {
        return Err(Error::Data(format!(
            "fold {}: no postoperative events for sequence training",
            fold.name
        )));
    }
    let mut stage2 =
        Stage2Model::new(IntensityLstm::init(cfg.seed), net, store.clone(), s2_train, s2_val, cfg.joint)?;
    let report2 = fit(&mut stage2, &cfg.stage2)?;

    let frame = score_frames(&stage2.net, &store, &facial_events(clips, &fold.test))?;
    let (step, event) =
        score_sequences(&stage2.lstm, &stage2.net, &store, &seq_pairs(&postop_events(clips, &fold.test)))?;
    let rows = vec![
        MetricsRow { fold: fold.name.clone(), scope: "frame", metrics: frame },
        MetricsRow { fold: fold.name.clone(), scope: "step", metrics: step },
        MetricsRow { fold: fold.name.clone(), scope: "event", metrics: event },
    ];
    Ok((rows, report1, report2))
}

fn seq_pairs(refs: &[SeqRef]) -> Vec<(usize, f64)> {
    refs.iter().map(|s| (s.slot, s.label)).collect()
}

/// Train per fold, then append the unweighted mean rows.
pub fn evaluate_trained(clips: &[ClipRecord], folds: &[Fold], cfg: &EvalConfig) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for fold in folds {
        let (fold_rows, _, _) = eval_fold_trained(clips, fold, cfg)?;
        rows.extend(fold_rows);
    }
    rows.extend(aggregate(&rows));
    Ok(rows)
}

/// Score existing weights over each fold's test set (no training). With no
/// LSTM only the frame scope is reported.
pub fn evaluate_scored(
    clips: &[ClipRecord],
    folds: &[Fold],
    net: &BilinearNet,
    lstm: Option<&IntensityLstm>,
    store_cfg: StoreConfig,
) -> Result<Vec<MetricsRow>> {
    let store = {
        let streams = [&net.stream_a, &net.stream_b];
        FrameStore::build(&streams, clips, &vec![Variant::Clean; clips.len()], store_cfg)?
    };
    let mut rows = Vec::new();
    for fold in folds {
        let frame = score_frames(net, &store, &facial_events(clips, &fold.test))?;
        rows.push(MetricsRow { fold: fold.name.clone(), scope: "frame", metrics: frame });
        if let Some(lstm) = lstm {
            let events = seq_pairs(&postop_events(clips, &fold.test));
            if !events.is_empty() {
                let (step, event) = score_sequences(lstm, net, &store, &events)?;
                rows.push(MetricsRow { fold: fold.name.clone(), scope: "step", metrics: step });
                rows.push(MetricsRow { fold: fold.name.clone(), scope: "event", metrics: event });
            }
        }
    }
    rows.extend(aggregate(&rows));
    Ok(rows)
}
