//! Evaluation protocol: per-scale total accuracy for the HR upper bound,
//! the bicubic baseline, externally restored images, and the feature-space
//! super-resolution pipeline; table-shaped reports, accuracy-vs-scale
//! curves, and convergence comparison between training logs.
//!
//! The rendered text table mirrors the published layout: one row per
//! method, one column per scale factor (`x2`..`x8`) plus a trailing `avg`
//! column; accuracies are rendered ×100 with 3 decimals; absent cells
//! render as `-`.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::backbone::{accuracy, FerModel};
use crate::data::{load_dataset, upsample_to_canonical, PairedSample, RgbImage};
use crate::gan::FsrModel;
use crate::spd::{FeatureTensor, Provenance};
use crate::util::moving_average;
use crate::{Error, Result};

/// What gets classified for a given (method, scale) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    /// High-resolution upper bound.
    Hr,
    /// LR bicubically upsampled, classified directly.
    Bicubic,
    /// Externally restored images from a mirrored directory layout.
    RestoredImages,
    /// LR upsampled, feature-extracted, super-resolved, classified.
    FsrFer,
}

impl EvalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMethod::Hr => "hr",
            EvalMethod::Bicubic => "bicubic",
            EvalMethod::RestoredImages => "restored-images",
            EvalMethod::FsrFer => "fsr-fer",
        }
    }

    pub fn parse(s: &str) -> Result<EvalMethod> {
        match s {
            "hr" => Ok(EvalMethod::Hr),
            "bicubic" => Ok(EvalMethod::Bicubic),
            "restored-images" => Ok(EvalMethod::RestoredImages),
            "fsr-fer" => Ok(EvalMethod::FsrFer),
            other => Err(Error::Config(format!(
                "unknown evaluation method '{other}' (expected hr|bicubic|restored-images|fsr-fer)"
            ))),
        }
    }
}

/// Models and external sources available to the evaluator.
pub struct EvalContext<'a> {
    pub fer: &'a FerModel,
    pub fsr: Option<&'a FsrModel>,
    /// Root holding `x<scale>/<class_name>/*.png` restored images.
    pub restored_root: Option<&'a Path>,
}

fn predict_images_batched(fer: &FerModel, images: &[&RgbImage]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        preds.extend(fer.predict_images(chunk)?);
    }
    Ok(preds)
}

/// Total accuracy of one method at one scale. Returns (accuracy, n).
pub fn evaluate(
    method: EvalMethod,
    ctx: &EvalContext,
    pairs: &[PairedSample],
    scale: u32,
) -> Result<(f64, usize)> {
    if method == EvalMethod::RestoredImages {
        return evaluate_restored(ctx, scale);
    }
    let at_scale: Vec<&PairedSample> = pairs.iter().filter(|p| p.scale == scale).collect();
    if at_scale.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no evaluation pairs at scale x{scale}"
        )));
    }
    let labels: Vec<usize> = at_scale.iter().map(|p| p.hr.label).collect();
    let canonical = ctx.fer.cfg.input_size;
    let preds = match method {
        EvalMethod::Hr => {
            let imgs: Vec<&RgbImage> = at_scale.iter().map(|p| &p.hr.image).collect();
            predict_images_batched(ctx.fer, &imgs)?
        }
        EvalMethod::Bicubic => {
            let up: Vec<RgbImage> = at_scale
                .iter()
                .map(|p| upsample_to_canonical(&p.lr.image, canonical, canonical))
                .collect();
            let refs: Vec<&RgbImage> = up.iter().collect();
            predict_images_batched(ctx.fer, &refs)?
        }
        EvalMethod::FsrFer => {
            let fsr = ctx.fsr.ok_or_else(|| Error::MissingPrerequisite {
                what: "a super-resolution checkpoint for the fsr-fer method".into(),
                hint: "run train-fsr first or drop fsr-fer from the method list".into(),
            })?;
            if fsr.feature_dim != ctx.fer.cfg.feature_dim() {
                return Err(Error::Config(format!(
                    "checkpoint mismatch: generator expects {}-dim features, classifier produces {}",
                    fsr.feature_dim,
                    ctx.fer.cfg.feature_dim()
                )));
            }
            let mut preds = Vec::with_capacity(at_scale.len());
            for chunk in at_scale.chunks(32) {
                let up: Vec<RgbImage> = chunk
                    .iter()
                    .map(|p| upsample_to_canonical(&p.lr.image, canonical, canonical))
                    .collect();
                let refs: Vec<&RgbImage> = up.iter().collect();
                let feats = ctx.fer.extract_features(&refs, Provenance::Lr)?;
                let d = fsr.feature_dim;
                let mut batch = ArrayD::zeros(IxDyn(&[feats.len(), d, d]));
                for (i, f) in feats.iter().enumerate() {
                    batch.index_axis_mut(Axis(0), i).assign(&f.mat);
                }
                let sr = fsr.generator_forward_batch(&batch)?;
                let sr_feats: Vec<FeatureTensor> = (0..feats.len())
                    .map(|i| {
                        FeatureTensor::new(sr.index_axis(Axis(0), i).to_owned(), Provenance::Sr)
                    })
                    .collect();
                preds.extend(ctx.fer.predict_features(&sr_feats));
            }
            preds
        }
        EvalMethod::RestoredImages => unreachable!(),
    };
    Ok((accuracy(&preds, &labels), labels.len()))
}

fn evaluate_restored(ctx: &EvalContext, scale: u32) -> Result<(f64, usize)> {
    let root = ctx.restored_root.ok_or_else(|| Error::MissingPrerequisite {
        what: "a restored-images directory".into(),
        hint: "pass --restored-dir pointing at x<scale>/<class>/ image trees".into(),
    })?;
    let ds = load_dataset(root, &format!("x{scale}"), ctx.fer.cfg.input_size)?;
    if ds.items.is_empty() {
        return Err(Error::Dataset(format!(
            "restored-images directory for x{scale} holds no images"
        )));
    }
    let imgs: Vec<&RgbImage> = ds.items.iter().map(|s| &s.image).collect();
    let preds = predict_images_batched(ctx.fer, &imgs)?;
    let labels: Vec<usize> = ds.items.iter().map(|s| s.label).collect();
    Ok((accuracy(&preds, &labels), labels.len()))
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

/// Per-method, per-scale accuracy table with sample counts.
#[derive(Debug, Clone)]
pub struct ScaleReport {
    /// Row order.
    pub methods: Vec<String>,
    pub scales: Vec<u32>,
    /// method -> scale -> (accuracy fraction, sample count).
    pub cells: BTreeMap<String, BTreeMap<u32, (f64, usize)>>,
    pub config_echo: BTreeMap<String, String>,
    pub seed: u64,
    /// Methods skipped (present in zero scales) and other notes.
    pub warnings: Vec<String>,
}

impl ScaleReport {
    pub fn new(scales: &[u32], seed: u64) -> Self {
        ScaleReport {
            methods: Vec::new(),
            scales: scales.to_vec(),
            cells: BTreeMap::new(),
            config_echo: BTreeMap::new(),
            seed,
            warnings: Vec::new(),
        }
    }

    pub fn insert(&mut self, method: &str, scale: u32, accuracy: f64, n: usize) {
        assert!((0.0..=1.0).contains(&accuracy), "accuracy out of range");
        if !self.methods.iter().any(|m| m == method) {
            self.methods.push(method.to_string());
        }
        self.cells
            .entry(method.to_string())
            .or_default()
            .insert(scale, (accuracy, n));
    }

    /// Mean accuracy over this method's present cells.
    pub fn row_mean(&self, method: &str) -> Option<f64> {
        let row = self.cells.get(method)?;
        if row.is_empty() {
            return None;
        }
        Some(row.values().map(|(a, _)| a).sum::<f64>() / row.len() as f64)
    }

    /// CSV with header `method,scale,accuracy,n`, rows in method then scale
    /// order; accuracies as fractions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,scale,accuracy,n\n");
        for method in &self.methods {
            if let Some(row) = self.cells.get(method) {
                for (scale, (acc, n)) in row {
                    out.push_str(&format!("{method},{scale},{acc},{n}\n"));
                }
            }
        }
        out
    }

    /// Text table mirroring the published layout (see module docs).
    pub fn render_table(&self) -> String {
        let name_w = self
            .methods
            .iter()
            .map(|m| m.len())
            .chain(std::iter::once("Method".len()))
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        out.push_str(&format!("{:<name_w$}", "Method"));
        for s in &self.scales {
            out.push_str(&format!(" | {:>7}", format!("x{s}")));
        }
        out.push_str(&format!(" | {:>7}\n", "avg"));
        out.push_str(&"-".repeat(name_w));
        for _ in 0..=self.scales.len() {
            out.push_str("-+-");
            out.push_str(&"-".repeat(7));
        }
        out.push('\n');
        for method in &self.methods {
            out.push_str(&format!("{method:<name_w$}"));
            let row = self.cells.get(method);
            for s in &self.scales {
                match row.and_then(|r| r.get(s)) {
                    Some((acc, _)) => out.push_str(&format!(" | {:>7.3}", acc * 100.0)),
                    None => out.push_str(&format!(" | {:>7}", "-")),
                }
            }
            match self.row_mean(method) {
                Some(avg) => out.push_str(&format!(" | {:>7.3}\n", avg * 100.0)),
                None => out.push_str(&format!(" | {:>7}\n", "-")),
            }
        }
        out
    }
}

/// Fill every requested (method, scale) cell. Methods available at zero
/// scales are omitted with a warning instead of failing the whole report.
pub fn build_report(
    methods: &[EvalMethod],
    scales: &[u32],
    ctx: &EvalContext,
    pairs: &[PairedSample],
    seed: u64,
) -> Result<ScaleReport> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no evaluation methods given".into()));
    }
    let mut report = ScaleReport::new(scales, seed);
    for &method in methods {
        let mut hits = 0usize;
        for &scale in scales {
            match evaluate(method, ctx, pairs, scale) {
                Ok((acc, n)) => {
                    report.insert(method.name(), scale, acc, n);
                    hits += 1;
                }
                Err(e) => {
                    // a scale absent for this method leaves the cell empty;
                    // a missing prerequisite for the method is fatal
                    if let Error::MissingPrerequisite { .. } = e {
                        return Err(e);
                    }
                    report
                        .warnings
                        .push(format!("{} at x{scale}: {e}", method.name()));
                }
            }
        }
        if hits == 0 {
            report
                .warnings
                .push(format!("method {} present in zero scales; row omitted", method.name()));
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// curves
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Accuracy-vs-scale line chart (SVG) plus the underlying CSV alongside
/// (same path with a `.csv` extension). Y axis spans [0,1]; X ticks are the
/// report's scale factors.
pub fn plot_curves(report: &ScaleReport, out_svg: &Path) -> Result<()> {
    if report.methods.is_empty() {
        return Err(Error::InvalidArgument("empty report".into()));
    }
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 160.0, 20.0, 45.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let smin = *report.scales.iter().min().unwrap() as f64;
    let smax = *report.scales.iter().max().unwrap() as f64;
    let xpos = |s: f64| ml + (s - smin) / (smax - smin).max(1.0) * pw;
    let ypos = |a: f64| mt + (1.0 - a) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw
    ));
    // y ticks 0.0 .. 1.0
    for t in 0..=10 {
        let a = t as f64 / 10.0;
        let y = ypos(a);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{a:.1}</text>\n",
            ml - 9.0,
            y + 4.0
        ));
    }
    // x ticks at each scale
    for &s in &report.scales {
        let x = xpos(s as f64);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{0}\" x2=\"{x}\" y2=\"{1}\" stroke=\"black\"/>\n",
            mt + ph,
            mt + ph + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">x{s}</text>\n",
            mt + ph + 20.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">down-sample scale</text>\n",
        ml + pw / 2.0,
        h - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {0})\">total accuracy</text>\n",
        mt + ph / 2.0
    ));
    // one polyline per method
    for (mi, method) in report.methods.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let row = match report.cells.get(method) {
            Some(r) if !r.is_empty() => r,
            _ => continue,
        };
        let pts: Vec<String> = row
            .iter()
            .map(|(&s, &(a, _))| format!("{:.2},{:.2}", xpos(s as f64), ypos(a)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        for (&s, &(a, _)) in row {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                xpos(s as f64),
                ypos(a)
            ));
        }
        // legend
        let ly = mt + 16.0 + 18.0 * mi as f64;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            ml + pw + 12.0,
            ml + pw + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{method}</text>\n",
            ml + pw + 40.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");

    if let Some(parent) = out_svg.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(out_svg, svg).map_err(|e| Error::io(out_svg, e))?;
    let csv_path = out_svg.with_extension("csv");
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// convergence comparison
// ---------------------------------------------------------------------------

/// One validation measurement parsed from a training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergencePoint {
    pub iteration: u64,
    pub accuracy: f64,
}

/// Parse the validation records (`iteration`, `val_mean_accuracy`) out of a
/// JSONL training log.
pub fn read_val_series(log: &Path) -> Result<Vec<ConvergencePoint>> {
    let f = std::fs::File::open(log).map_err(|e| Error::io(log, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(log, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("bad log line in {}: {e}", log.display())))?;
        if let (Some(it), Some(acc)) = (
            v.get("iteration").and_then(|x| x.as_u64()),
            v.get("val_mean_accuracy").and_then(|x| x.as_f64()),
        ) {
            out.push(ConvergencePoint {
                iteration: it,
                accuracy: acc,
            });
        }
    }
    Ok(out)
}

/// Smoothed validation curve (window-5 trailing moving average).
pub fn smoothed(points: &[ConvergencePoint]) -> Vec<ConvergencePoint> {
    let accs: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    let sm = moving_average(&accs, 5);
    points
        .iter()
        .zip(sm)
        .map(|(p, accuracy)| ConvergencePoint {
            iteration: p.iteration,
            accuracy,
        })
        .collect()
}

/// The last smoothed validation accuracy of a run.
pub fn final_smoothed_accuracy(points: &[ConvergencePoint]) -> Option<f64> {
    smoothed(points).last().map(|p| p.accuracy)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvergenceOutcome {
    /// First iteration at which run A's smoothed accuracy reaches the target.
    pub iters_a: Option<u64>,
    pub iters_b: Option<u64>,
    /// iters_a / iters_b when both runs reached the target.
    pub ratio: Option<f64>,
}

impl std::fmt::Display for ConvergenceOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: Option<u64>| match v {
            Some(n) => n.to_string(),
            None => "not reached".to_string(),
        };
        write!(
            f,
            "A reaches target at {}, B at {}, ratio {}",
            show(self.iters_a),
            show(self.iters_b),
            match self.ratio {
                Some(r) => format!("{r:.3}"),
                None => "undefined".to_string(),
            }
        )
    }
}

/// First iteration at which each run's smoothed validation accuracy reaches
/// `target`, and the ratio between them.
pub fn convergence_compare(
    a: &[ConvergencePoint],
    b: &[ConvergencePoint],
    target: f64,
) -> ConvergenceOutcome {
    let first_reach = |pts: &[ConvergencePoint]| -> Option<u64> {
        smoothed(pts)
            .iter()
            .find(|p| p.accuracy >= target)
            .map(|p| p.iteration)
    };
    let iters_a = first_reach(a);
    let iters_b = first_reach(b);
    let ratio = match (iters_a, iters_b) {
        (Some(x), Some(y)) if y > 0 => Some(x as f64 / y as f64),
        _ => None,
    };
    ConvergenceOutcome {
        iters_a,
        iters_b,
        ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FerConfig;
    use crate::data::{make_pairs, synthetic};
    use crate::gan::GanConfig;

    fn tiny_world() -> (tempfile::TempDir, FerModel, Vec<PairedSample>) {
        let dir = tempfile::tempdir().unwrap();
        synthetic::generate_dataset(dir.path(), 2, 77).unwrap();
        let val = load_dataset(dir.path(), "val", 100).unwrap();
        let pairs = make_pairs(&val.items, &[2, 4]).unwrap();
        let mut fer = FerModel::new(FerConfig::smoke(), 5);
        fer.frozen = true;
        (dir, fer, pairs)
    }

    #[test]
    fn evaluate_runs_all_pair_methods() {
        let (_d, fer, pairs) = tiny_world();
        let fsr = FsrModel::new(GanConfig::smoke(), fer.cfg.feature_dim(), 9).unwrap();
        let ctx = EvalContext {
            fer: &fer,
            fsr: Some(&fsr),
            restored_root: None,
        };
        for m in [EvalMethod::Hr, EvalMethod::Bicubic, EvalMethod::FsrFer] {
            let (acc, n) = evaluate(m, &ctx, &pairs, 2).unwrap();
            assert!((0.0..=1.0).contains(&acc), "{m:?} accuracy {acc}");
            assert_eq!(n, 28);
        }
    }

    #[test]
    fn missing_scale_is_an_error() {
        let (_d, fer, pairs) = tiny_world();
        let ctx = EvalContext {
            fer: &fer,
            fsr: None,
            restored_root: None,
        };
        assert!(evaluate(EvalMethod::Hr, &ctx, &pairs, 7).is_err());
    }

    #[test]
    fn identity_generator_equals_bicubic_exactly() {
        let (_d, fer, pairs) = tiny_world();
        let fsr = FsrModel::new(GanConfig::smoke(), fer.cfg.feature_dim(), 9).unwrap();
        let ctx = EvalContext {
            fer: &fer,
            fsr: Some(&fsr),
            restored_root: None,
        };
        for scale in [2, 4] {
            let (b, nb) = evaluate(EvalMethod::Bicubic, &ctx, &pairs, scale).unwrap();
            let (f, nf) = evaluate(EvalMethod::FsrFer, &ctx, &pairs, scale).unwrap();
            assert_eq!(b, f, "scale x{scale}");
            assert_eq!(nb, nf);
        }
    }

    #[test]
    fn restored_images_mode_reads_mirrored_layout() {
        let (dir, fer, pairs) = tiny_world();
        // restored tree: x2/<class>/...; reuse the val images themselves
        let val_root = dir.path().join("val");
        let restored = dir.path().join("restored");
        for class_dir in std::fs::read_dir(&val_root).unwrap() {
            let class_dir = class_dir.unwrap();
            let dst = restored.join("x2").join(class_dir.file_name());
            std::fs::create_dir_all(&dst).unwrap();
            for f in std::fs::read_dir(class_dir.path()).unwrap() {
                let f = f.unwrap();
                std::fs::copy(f.path(), dst.join(f.file_name())).unwrap();
            }
        }
        let ctx = EvalContext {
            fer: &fer,
            fsr: None,
            restored_root: Some(&restored),
        };
        let (acc_restored, n) = evaluate(EvalMethod::RestoredImages, &ctx, &pairs, 2).unwrap();
        let (acc_hr, _) = evaluate(EvalMethod::Hr, &ctx, &pairs, 2).unwrap();
        assert_eq!(n, 28);
        // the "restored" images are the HR originals, so accuracy matches
        assert_eq!(acc_restored, acc_hr);
        // absent scale directory -> error (build_report turns this into a warning)
        assert!(evaluate(EvalMethod::RestoredImages, &ctx, &pairs, 4).is_err());
    }

    #[test]
    fn report_fills_cells_and_averages() {
        let (_d, fer, pairs) = tiny_world();
        let ctx = EvalContext {
            fer: &fer,
            fsr: None,
            restored_root: None,
        };
        let report = build_report(
            &[EvalMethod::Hr, EvalMethod::Bicubic],
            &[2, 4],
            &ctx,
            &pairs,
            5,
        )
        .unwrap();
        assert_eq!(report.methods, vec!["hr", "bicubic"]);
        assert_eq!(report.cells["hr"].len(), 2);
        let mean = report.row_mean("hr").unwrap();
        let manual =
            (report.cells["hr"][&2].0 + report.cells["hr"][&4].0) / 2.0;
        assert!((mean - manual).abs() < 1e-15);
        let csv = report.to_csv();
        assert!(csv.starts_with("method,scale,accuracy,n\n"));
        assert_eq!(csv.lines().count(), 1 + 4, "header plus methods x scales");
    }

    #[test]
    fn report_csv_is_stable_across_renders() {
        let mut r = ScaleReport::new(&[2, 3], 1);
        r.insert("hr", 2, 0.9821428571428571, 28);
        r.insert("hr", 3, 0.875, 28);
        assert_eq!(r.to_csv(), r.to_csv());
        assert!(r.to_csv().contains("hr,2,0.9821428571428571,28\n"));
    }

    #[test]
    fn table_renders_published_values() {
        let mut r = ScaleReport::new(&[2, 3, 4, 5, 6, 7, 8], 0);
        let bicubic = [84.518, 78.357, 72.686, 67.177, 60.495, 52.771, 40.264];
        let fsr = [83.214, 81.226, 78.031, 75.196, 71.675, 68.872, 64.244];
        for (i, s) in (2..=8).enumerate() {
            r.insert("Bicubic", s, bicubic[i] / 100.0, 3068);
            r.insert("our FSR-FER", s, fsr[i] / 100.0, 3068);
        }
        let table = r.render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("Method"));
        assert!(lines[2].contains("84.518") && lines[2].contains("40.264"));
        assert!(lines[3].contains("64.244"));
        // the avg column reproduces the published row average
        assert!(lines[3].ends_with("74.637"), "avg column: {}", lines[3]);
        assert!(lines[2].ends_with("65.181"), "avg column: {}", lines[2]);
    }

    #[test]
    fn table_marks_missing_cells() {
        let mut r = ScaleReport::new(&[2, 3], 0);
        r.insert("partial", 2, 0.5, 10);
        let t = r.render_table();
        assert!(t.contains("      -"), "missing cell placeholder: {t}");
    }

    #[test]
    fn curves_emit_svg_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ScaleReport::new(&[2, 4, 8], 0);
        for (m, base) in [("hr", 0.95), ("bicubic", 0.80)] {
            for (i, s) in [2u32, 4, 8].iter().enumerate() {
                r.insert(m, *s, base - 0.1 * i as f64, 28);
            }
        }
        let svg_path = dir.path().join("curves.svg");
        plot_curves(&r, &svg_path).unwrap();
        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert!(svg.contains("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains(">x8<"));
        assert!(svg.contains(">0.0<") && svg.contains(">1.0<"), "y axis spans [0,1]");
        let csv = std::fs::read_to_string(svg_path.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 6, "methods x scales rows");
        // re-render is byte-identical
        plot_curves(&r, &svg_path).unwrap();
        assert_eq!(csv, std::fs::read_to_string(svg_path.with_extension("csv")).unwrap());
    }

    #[test]
    fn convergence_identical_logs_give_ratio_one() {
        let pts: Vec<ConvergencePoint> = (1..=10)
            .map(|i| ConvergencePoint {
                iteration: i * 100,
                accuracy: 0.05 * i as f64,
            })
            .collect();
        let out = convergence_compare(&pts, &pts, 0.3);
        assert_eq!(out.iters_a, out.iters_b);
        assert_eq!(out.ratio, Some(1.0));
    }

    #[test]
    fn convergence_half_iterations_gives_ratio_two() {
        let slow: Vec<ConvergencePoint> = (1..=20)
            .map(|i| ConvergencePoint {
                iteration: i * 100,
                accuracy: (0.05 * i as f64).min(1.0),
            })
            .collect();
        let fast: Vec<ConvergencePoint> = (1..=20)
            .map(|i| ConvergencePoint {
                iteration: i * 100,
                accuracy: (0.10 * i as f64).min(1.0),
            })
            .collect();
        let out = convergence_compare(&slow, &fast, 0.35);
        // smoothed slow curve first reaches 0.35 at point 9 (iter 900):
        // mean(0.25..0.45 step 0.05) = 0.35; fast at point 6 (iter 600)
        assert_eq!(out.iters_a, Some(900));
        assert_eq!(out.iters_b, Some(600));
        assert_eq!(out.ratio, Some(1.5));
    }

    #[test]
    fn convergence_unreached_target_is_reported() {
        let pts: Vec<ConvergencePoint> = (1..=5)
            .map(|i| ConvergencePoint {
                iteration: i * 100,
                accuracy: 0.1,
            })
            .collect();
        let out = convergence_compare(&pts, &pts, 0.9);
        assert_eq!(out.iters_a, None);
        assert_eq!(out.ratio, None);
        assert!(out.to_string().contains("not reached"));
    }

    #[test]
    fn final_smoothed_accuracy_matches_window() {
        let pts: Vec<ConvergencePoint> = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &a)| ConvergencePoint {
                iteration: i as u64,
                accuracy: a,
            })
            .collect();
        let f = final_smoothed_accuracy(&pts).unwrap();
        assert!((f - 0.5).abs() < 1e-12, "mean of last 5 = 0.5, got {f}");
    }

    #[test]
    fn val_series_round_trips_through_log_files() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("train.jsonl");
        std::fs::write(
            &log,
            concat!(
                "{\"iteration\":1,\"l_total_g\":0.5,\"lr\":0.0002}\n",
                "{\"iteration\":100,\"val_mean_accuracy\":0.25,\"val_accuracy_per_scale\":{\"2\":0.3}}\n",
                "{\"iteration\":200,\"val_mean_accuracy\":0.5}\n"
            ),
        )
        .unwrap();
        let pts = read_val_series(&log).unwrap();
        assert_eq!(
            pts,
            vec![
                ConvergencePoint { iteration: 100, accuracy: 0.25 },
                ConvergencePoint { iteration: 200, accuracy: 0.5 }
            ]
        );
    }
}
