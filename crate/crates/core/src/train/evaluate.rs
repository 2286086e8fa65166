use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::metrics::{
    mse, pearson_lcc, similarity_accuracy, spearman_srcc, system_aggregate, system_same_ratio,
    MetricError,
};
use super::{check_task, Example, TrainError};
use crate::audio::Task;
use crate::model::Model;

/// One evaluated item.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub system: String,
    pub pred: f64,
    pub gt: f64,
}

/// Error, linear and rank agreement at one aggregation level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMetrics {
    pub mse: f64,
    pub lcc: Result<f64, MetricError>,
    pub srcc: Result<f64, MetricError>,
}

impl LevelMetrics {
    pub fn compute(pred: &[f64], gt: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            mse: mse(pred, gt)?,
            lcc: pearson_lcc(pred, gt),
            srcc: spearman_srcc(pred, gt),
        })
    }
}

/// Per-system fraction of pairs answered "Same".
#[derive(Clone, Debug, PartialEq)]
pub struct SameRatio {
    pub system: String,
    pub pred: f64,
    pub gt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMetrics {
    pub accuracy: f64,
    /// Agreement between predicted and human Same-ratios across systems.
    pub same_ratio: LevelMetrics,
    pub same_ratios: Vec<SameRatio>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub n_items: usize,
    pub n_systems: usize,
    pub utterance: LevelMetrics,
    pub system: LevelMetrics,
    pub similarity: Option<SimilarityMetrics>,
}

fn scores(rows: &[Prediction]) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    (
        rows.iter().map(|r| r.pred).collect(),
        rows.iter().map(|r| r.gt).collect(),
        rows.iter().map(|r| r.system.clone()).collect(),
    )
}

impl MetricsReport {
    /// Assembles every metric from per-item predictions.
    pub fn from_predictions(task: Task, rows: &[Prediction]) -> Result<Self, MetricError> {
        let (pred, gt, systems) = scores(rows);
        let utterance = LevelMetrics::compute(&pred, &gt)?;
        let sys_pred = system_aggregate(&pred, &systems)?;
        let sys_gt = system_aggregate(&gt, &systems)?;
        let sp: Vec<f64> = sys_pred.values().copied().collect();
        let sg: Vec<f64> = sys_gt.values().copied().collect();
        let system = LevelMetrics::compute(&sp, &sg)?;
        let similarity = match task {
            Task::Mos => None,
            Task::Similarity => {
                let rp = system_same_ratio(&pred, &systems)?;
                let rg = system_same_ratio(&gt, &systems)?;
                let same_ratios: Vec<SameRatio> = rp
                    .iter()
                    .zip(&rg)
                    .map(|((system, &pred), (_, &gt))| SameRatio {
                        system: system.clone(),
                        pred,
                        gt,
                    })
                    .collect();
                let p: Vec<f64> = same_ratios.iter().map(|r| r.pred).collect();
                let g: Vec<f64> = same_ratios.iter().map(|r| r.gt).collect();
                Some(SimilarityMetrics {
                    accuracy: similarity_accuracy(&pred, &gt)?,
                    same_ratio: LevelMetrics::compute(&p, &g)?,
                    same_ratios,
                })
            }
        };
        Ok(Self {
            task,
            n_items: rows.len(),
            n_systems: sys_pred.len(),
            utterance,
            system,
            similarity,
        })
    }

    /// Key/value pairs in report order, correlations that are undefined
    /// given as `Err`.
    pub fn entries(&self) -> Vec<(String, Result<f64, MetricError>)> {
        let mut out = Vec::new();
        let mut level = |prefix: &str, m: &LevelMetrics| {
            out.push((format!("{prefix}_mse"), Ok(m.mse)));
            out.push((format!("{prefix}_lcc"), m.lcc.clone()));
            out.push((format!("{prefix}_srcc"), m.srcc.clone()));
        };
        level("utt", &self.utterance);
        level("sys", &self.system);
        if let Some(s) = &self.similarity {
            level("same_ratio", &s.same_ratio);
            out.push(("acc".to_string(), Ok(s.accuracy)));
        }
        out
    }

    /// Value of a report key such as `utt_lcc`.
    pub fn get(&self, key: &str) -> Option<Result<f64, MetricError>> {
        self.entries()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
    }

    /// `key = value` text. Undefined correlations are written as
    /// `undefined` and explained in a comment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "n_items = {}", self.n_items);
        let _ = writeln!(s, "n_systems = {}", self.n_systems);
        for (k, v) in self.entries() {
            match v {
                Ok(v) => {
                    let _ = writeln!(s, "{k} = {v}");
                }
                Err(e) => {
                    let _ = writeln!(s, "# {k}: {e}");
                    let _ = writeln!(s, "{k} = undefined");
                }
            }
        }
        if let Some(sim) = &self.similarity {
            let _ = writeln!(s, "# per-system Same ratio: predicted human");
            for r in &sim.same_ratios {
                let _ = writeln!(s, "same_ratio.{} = {} {}", r.system, r.pred, r.gt);
            }
        }
        s
    }
}

/// Arithmetic mean of several reports key by key (one per training seed).
/// A correlation undefined in any report stays undefined.
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport, MetricError> {
    let first = reports.first().ok_or(MetricError::Empty)?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_r = |f: &dyn Fn(&MetricsReport) -> Result<f64, MetricError>| {
        let mut sum = 0.0;
        for r in reports {
            sum += f(r)?;
        }
        Ok(sum / n)
    };
    let level = |pick: &dyn Fn(&MetricsReport) -> &LevelMetrics| LevelMetrics {
        mse: mean(&|r| pick(r).mse),
        lcc: mean_r(&|r| pick(r).lcc.clone()),
        srcc: mean_r(&|r| pick(r).srcc.clone()),
    };
    let similarity = match &first.similarity {
        None => None,
        Some(sim0) => {
            let sims: Vec<&SimilarityMetrics> = reports
                .iter()
                .map(|r| r.similarity.as_ref().ok_or(MetricError::Empty))
                .collect::<Result<_, _>>()?;
            let same_ratios = sim0
                .same_ratios
                .iter()
                .enumerate()
                .map(|(i, r0)| SameRatio {
                    system: r0.system.clone(),
                    pred: sims.iter().map(|s| s.same_ratios[i].pred).sum::<f64>() / n,
                    gt: r0.gt,
                })
                .collect();
            Some(SimilarityMetrics {
                accuracy: sims.iter().map(|s| s.accuracy).sum::<f64>() / n,
                same_ratio: level(&|r| &r.similarity.as_ref().expect("checked").same_ratio),
                same_ratios,
            })
        }
    };
    for r in reports {
        let systems = |m: &MetricsReport| m.similarity.as_ref().map(|s| s.same_ratios.len());
        if r.task != first.task || r.n_items != first.n_items || systems(r) != systems(first) {
            return Err(MetricError::LengthMismatch {
                left: r.n_items,
                right: first.n_items,
            });
        }
    }
    Ok(MetricsReport {
        task: first.task,
        n_items: first.n_items,
        n_systems: first.n_systems,
        utterance: level(&|r| &r.utterance),
        system: level(&|r| &r.system),
        similarity,
    })
}

/// Eval-mode utterance scores for every example, in input order.
pub fn predict_all(model: &Model, data: &[Example]) -> Result<Vec<Prediction>, TrainError> {
    check_task(model.config(), data)?;
    data.iter()
        .map(|ex| {
            Ok(Prediction {
                id: ex.id.clone(),
                system: ex.system.clone(),
                pred: model.predict(&ex.input)?.utterance_score,
                gt: ex.target,
            })
        })
        .collect()
}

/// Predictions plus the metrics computed from them.
pub fn evaluate(
    model: &Model,
    data: &[Example],
) -> Result<(MetricsReport, Vec<Prediction>), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let rows = predict_all(model, data)?;
    let report = MetricsReport::from_predictions(model.config().task, &rows)?;
    Ok((report, rows))
}

fn header(task: Task) -> [&'static str; 4] {
    match task {
        Task::Mos => ["utt_id", "system_id", "pred", "gt"],
        Task::Similarity => ["pair_id", "system_pair_id", "pred", "gt"],
    }
}

/// CSV `utt_id,system_id,pred,gt` (`pair_id,system_pair_id,pred,gt` for
/// pairs). Scores are written with full round-trip precision.
pub fn write_predictions(path: &Path, task: Task, rows: &[Prediction]) -> Result<(), TrainError> {
    let csv_err = |e: csv::Error| TrainError::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header(task)).map_err(csv_err)?;
    for r in rows {
        w.write_record([&r.id, &r.system, &r.pred.to_string(), &r.gt.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| TrainError::io(path, e))
}

/// Reads a prediction dump; the header decides the task.
pub fn read_predictions(path: &Path) -> Result<(Task, Vec<Prediction>), TrainError> {
    let err = |reason: String| TrainError::Csv {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let head: Vec<String> = r
        .headers()
        .map_err(|e| err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let task = [Task::Mos, Task::Similarity]
        .into_iter()
        .find(|&t| head == header(t))
        .ok_or_else(|| err(format!("unrecognized header {head:?}")))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let num = |j: usize| -> Result<f64, TrainError> {
            rec[j]
                .parse()
                .map_err(|_| err(format!("row {}: `{}` is not a number", i + 1, &rec[j])))
        };
        rows.push(Prediction {
            id: rec[0].to_string(),
            system: rec[1].to_string(),
            pred: num(2)?,
            gt: num(3)?,
        });
    }
    Ok((task, rows))
}

/// Writes per-frame BLSTM outputs of a MOS model as CSV with header
/// `utt_id,system_id,frame_idx,f0..f{D-1}`.
pub fn export_embeddings(
    model: &Model,
    data: &[Example],
    path: &Path,
) -> Result<usize, TrainError> {
    if model.config().task != Task::Mos {
        return Err(TrainError::TaskMismatch {
            model: model.config().variant_name(),
            data: Task::Mos,
        });
    }
    check_task(model.config(), data)?;
    let io = |e| TrainError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let dim = model.embedding_dim();
    let mut head = String::from("utt_id,system_id,frame_idx");
    for d in 0..dim {
        let _ = write!(head, ",f{d}");
    }
    writeln!(w, "{head}").map_err(io)?;
    let mut rows = 0;
    for ex in data {
        let out = model.predict(&ex.input)?;
        for (t, frame) in out.frame_embeddings.rows().enumerate() {
            let mut line = format!("{},{},{t}", csv_field(&ex.id), csv_field(&ex.system));
            for v in frame {
                let _ = write!(line, ",{v}");
            }
            writeln!(w, "{line}").map_err(io)?;
            rows += 1;
        }
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(pred: &[f64], gt: &[f64], sys: &[&str]) -> Vec<Prediction> {
        pred.iter()
            .zip(gt)
            .zip(sys)
            .enumerate()
            .map(|(i, ((&p, &g), s))| Prediction {
                id: format!("u{i}"),
                system: s.to_string(),
                pred: p,
                gt: g,
            })
            .collect()
    }

    #[test]
    fn perfect_predictor() {
        let gt = [1.0, 2.2, 3.1, 4.0, 2.6, 1.5];
        let sys = ["a", "a", "b", "b", "c", "c"];
        for task in [Task::Mos, Task::Similarity] {
            let r = MetricsReport::from_predictions(task, &rows(&gt, &gt, &sys)).unwrap();
            assert_eq!(r.utterance.mse, 0.0);
            assert_eq!(r.utterance.lcc, Ok(1.0));
            assert_eq!(r.utterance.srcc, Ok(1.0));
            assert_eq!(r.system.mse, 0.0);
            if let Some(s) = r.similarity {
                assert_eq!(s.accuracy, 1.0);
                assert_eq!(s.same_ratio.mse, 0.0);
            }
        }
    }

    #[test]
    fn constant_predictor_reports_undefined_correlation() {
        let gt = [1.0, 2.0, 3.0];
        let r = MetricsReport::from_predictions(Task::Mos, &rows(&[2.5; 3], &gt, &["a", "b", "c"]))
            .unwrap();
        // variance 2/3 plus bias 0.25
        assert!((r.utterance.mse - (2.0 / 3.0 + 0.25)).abs() < 1e-15);
        assert_eq!(r.utterance.lcc, Err(MetricError::ZeroVariance("x")));
        let text = r.to_text();
        assert!(text.contains("utt_lcc = undefined"), "{text}");
    }

    #[test]
    fn report_keys() {
        let sys = ["a", "a", "b", "c"];
        let r = MetricsReport::from_predictions(
            Task::Similarity,
            &rows(&[1.0, 3.0, 2.0, 4.0], &[1.5, 2.0, 3.0, 3.5], &sys),
        )
        .unwrap();
        let keys: Vec<String> = r.entries().into_iter().map(|(k, _)| k).collect();
        assert_eq!(
            keys,
            [
                "utt_mse",
                "utt_lcc",
                "utt_srcc",
                "sys_mse",
                "sys_lcc",
                "sys_srcc",
                "same_ratio_mse",
                "same_ratio_lcc",
                "same_ratio_srcc",
                "acc"
            ]
        );
        assert_eq!(r.n_systems, 3);
        let avg = mean_report(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(avg.utterance.mse, r.utterance.mse);
    }

    #[test]
    fn prediction_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let r = rows(&[0.1 + 0.2, 1.0 / 3.0], &[1.0, 2.0], &["x,y", "z"]);
        write_predictions(&path, Task::Similarity, &r).unwrap();
        let (task, back) = read_predictions(&path).unwrap();
        assert_eq!(task, Task::Similarity);
        assert_eq!(back, r);
    }
}
