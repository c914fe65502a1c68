//! Localization error statistics and the variant comparison report.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::locnet::{Model, Stage};
use crate::pipeline::{locate_coarse, preprocess, refine, Landmark, PipelineConfig, Volume};
use crate::tensor::Float;

pub const CSV_HEADER: &str = "case_id,variant,err_mm,err_vox_x,err_vox_y,err_vox_z,err_vox_norm";

/// Euclidean distance in millimetres.
pub fn euclidean_error(pred: &Landmark, truth: &Landmark, spacing: [Float; 3]) -> Result<Float> {
    if pred.space != truth.space {
        return Err(Error::Contract(format!(
            "cannot compare a {:?} prediction with a {:?} truth",
            pred.space, truth.space
        )));
    }
    Ok((0..3)
        .map(|a| {
            let d = (pred.coords[a] - truth.coords[a]) * spacing[a];
            d * d
        })
        .sum::<Float>()
        .sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    CoarseOnly,
    Fine { superres: usize, parabola: bool },
}

impl Variant {
    /// The five rows of the comparison: coarse only, then fine at one and at
    /// `n` classes per voxel, each without and with parabola refinement.
    pub fn all(n: usize) -> [Variant; 5] {
        [
            Variant::CoarseOnly,
            Variant::Fine { superres: 1, parabola: false },
            Variant::Fine { superres: 1, parabola: true },
            Variant::Fine { superres: n, parabola: false },
            Variant::Fine { superres: n, parabola: true },
        ]
    }

    /// Label with the per-axis class count of the fine network, e.g. `fine+parab,256`.
    pub fn label(&self, window: usize) -> String {
        match *self {
            Variant::CoarseOnly => "coarse-only".into(),
            Variant::Fine { superres, parabola } => {
                let kind = if parabola { "fine+parab" } else { "fine" };
                format!("{kind},{}", window * superres)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseError {
    pub case_id: String,
    pub variant: String,
    pub err_mm: Float,
    /// Absolute per-axis error in voxels.
    pub err_vox: [Float; 3],
    pub err_vox_norm: Float,
}

impl CaseError {
    pub fn new(case_id: &str, variant: &str, pred: &Landmark, truth: &Landmark, spacing: [Float; 3]) -> Result<Self> {
        let err_mm = euclidean_error(pred, truth, spacing)?;
        let err_vox = [0, 1, 2].map(|a| (pred.coords[a] - truth.coords[a]).abs());
        Ok(CaseError {
            case_id: case_id.to_string(),
            variant: variant.to_string(),
            err_mm,
            err_vox,
            err_vox_norm: euclidean_error(pred, truth, [1.0; 3])?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregates {
    pub count: usize,
    pub median: Float,
    pub mean: Float,
    /// Sample standard deviation (n − 1 denominator); zero for fewer than two values.
    pub std: Float,
}

impl Aggregates {
    pub fn of(values: &[Float]) -> Self {
        let n = values.len();
        if n == 0 {
            return Aggregates {
                count: 0,
                median: Float::NAN,
                mean: Float::NAN,
                std: Float::NAN,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let mean = values.iter().sum::<Float>() / n as Float;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / (n - 1) as Float).sqrt()
        } else {
            0.0
        };
        Aggregates {
            count: n,
            median,
            mean,
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub variant: String,
    pub cases: Vec<CaseError>,
}

impl ErrorReport {
    pub fn mm(&self) -> Aggregates {
        Aggregates::of(&self.cases.iter().map(|c| c.err_mm).collect::<Vec<_>>())
    }

    pub fn voxels(&self) -> Aggregates {
        Aggregates::of(&self.cases.iter().map(|c| c.err_vox_norm).collect::<Vec<_>>())
    }
}

/// A test case: identifier, image and ground truth.
pub struct Case<'a> {
    pub id: &'a str,
    pub volume: &'a Volume,
    pub truth: Landmark,
}

/// Trained networks for the comparison: one coarse model and one fine model
/// per superresolution factor in use.
pub struct Models<'a> {
    pub coarse: &'a Model,
    pub fine: Vec<&'a Model>,
}

impl Models<'_> {
    fn fine(&self, superres: usize) -> Result<&Model> {
        self.fine
            .iter()
            .copied()
            .find(|m| m.superres() == superres)
            .ok_or_else(|| Error::config(format!("no fine model with superresolution {superres}")))
    }
}

/// Runs every variant on every case; the coarse estimate is shared by all fine variants.
pub fn evaluate_variants(
    cases: &[Case<'_>],
    models: &Models<'_>,
    variants: &[Variant],
    cfg: &PipelineConfig,
) -> Result<Vec<ErrorReport>> {
    if models.coarse.stage() != Stage::Coarse {
        return Err(Error::config("the coarse slot holds a fine model"));
    }
    for v in variants {
        if let Variant::Fine { superres, .. } = v {
            if models.fine(*superres)?.stage() != Stage::Fine {
                return Err(Error::config("a fine slot holds a coarse model"));
            }
        }
    }
    let window = cfg.window[0];
    let per_case: Vec<Vec<CaseError>> = cases
        .par_iter()
        .map(|case| {
            let pre = preprocess(case.volume, cfg.highpass_sigma)?;
            let (coarse, _, _, _) = locate_coarse(&pre, models.coarse, cfg)?;
            variants
                .iter()
                .map(|v| {
                    let pred = match *v {
                        Variant::CoarseOnly => coarse,
                        Variant::Fine { superres, parabola } => {
                            refine(&pre, coarse, models.fine(superres)?, cfg.window, parabola)?.0
                        }
                    };
                    CaseError::new(case.id, &v.label(window), &pred, &case.truth, case.volume.spacing)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(k, v)| ErrorReport {
            variant: v.label(window),
            cases: per_case.iter().map(|c| c[k].clone()).collect(),
        })
        .collect())
}

/// Per-case CSV; values use the shortest exact decimal form and labels
/// containing commas are quoted.
pub fn to_csv(reports: &[ErrorReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
    for r in reports {
        for c in &r.cases {
            w.write_record([
                c.case_id.clone(),
                c.variant.clone(),
                c.err_mm.to_string(),
                c.err_vox[0].to_string(),
                c.err_vox[1].to_string(),
                c.err_vox[2].to_string(),
                c.err_vox_norm.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 input")
}

/// Inverse of [`to_csv`]; variants keep their first-appearance order.
pub fn from_csv(text: &str) -> Result<Vec<ErrorReport>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut reports: Vec<ErrorReport> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if i == 0 {
            if rec.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected header {CSV_HEADER:?}"),
                });
            }
            continue;
        }
        if rec.len() != 7 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 7 fields, found {}", rec.len()),
            });
        }
        let num = |k: usize| {
            rec[k].parse::<Float>().map_err(|_| Error::Parse {
                line,
                msg: format!("not a number: {:?}", &rec[k]),
            })
        };
        let case = CaseError {
            case_id: rec[0].to_string(),
            variant: rec[1].to_string(),
            err_mm: num(2)?,
            err_vox: [num(3)?, num(4)?, num(5)?],
            err_vox_norm: num(6)?,
        };
        match reports.iter_mut().find(|r| r.variant == case.variant) {
            Some(r) => r.cases.push(case),
            None => reports.push(ErrorReport {
                variant: case.variant.clone(),
                cases: vec![case],
            }),
        }
    }
    Ok(reports)
}

/// Median, mean and standard deviation per variant, in millimetres and voxels.
pub fn format_table(reports: &[ErrorReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>5} {:>10} {:>10} {:>10} {:>11} {:>11}",
        "variant", "n", "median mm", "mean mm", "std mm", "median vox", "mean vox"
    );
    for r in reports {
        let (mm, vox) = (r.mm(), r.voxels());
        let _ = writeln!(
            s,
            "{:<18} {:>5} {:>10.3} {:>10.3} {:>10.3} {:>11.3} {:>11.3}",
            r.variant, mm.count, mm.median, mm.mean, mm.std, vox.median, vox.mean
        );
    }
    s
}
