//! Markdown, CSV, JSON and SVG renderings of detection counts and probe
//! results.
//!
//! Stored values are fractions in `[0, 1]`; percentages are formatted here.
//! Accuracy and gaps print with one decimal and BLEU with two. Undefined
//! values print as `n/a`, cells absent from the results as `missing`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hallucination::DetectionSummary;
use crate::probing::{BootstrapCi, LayerBootstrap, ProbeCell, ProbeSuiteResult, Section, Subset};
use crate::transformer::DecoderVariant;

pub const NA: &str = "n/a";
pub const MISSING: &str = "missing";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("nothing to report: no detection or probe results were given")]
    NothingToReport,
    #[error("invalid results: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, ReportError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableId {
    /// Aligned encoder probes: accuracy and BLEU per subset.
    EncoderAligned,
    /// Decoder layers read through the output head, with ablations.
    Decoder,
    /// Encoder probes without cross-attention: BLEU and 1-BLEU.
    EncoderNoCross,
    /// Hallucination counts per split.
    Detection,
}

impl TableId {
    pub const ALL: [TableId; 4] = [Self::EncoderAligned, Self::Decoder, Self::EncoderNoCross, Self::Detection];

    pub fn file_stem(self) -> &'static str {
        match self {
            Self::EncoderAligned => "table1_encoder",
            Self::Decoder => "table2_decoder",
            Self::EncoderNoCross => "table3_encoder_no_cross",
            Self::Detection => "table4_detection",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Self::EncoderAligned => "Word translation of aligned encoder probes",
            Self::Decoder => "Word translation of decoder layers through the output head",
            Self::EncoderNoCross => "Word translation of encoder probes without cross-attention",
            Self::Detection => "Detected hallucinations (X/Y: X of Y pairs flagged)",
        }
    }
}

/// Provenance printed in every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub model_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSpec {
    pub tables: Vec<TableId>,
    pub plots: bool,
    pub meta: RunMeta,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            tables: TableId::ALL.to_vec(),
            plots: true,
            meta: RunMeta::default(),
        }
    }
}

/// A rendered table: every cell is final text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: TableId,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n", self.title);
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        s += &line(&self.header);
        let seps: Vec<String> = self
            .header
            .iter()
            .enumerate()
            .map(|(i, _)| if i == 0 { ":--".to_string() } else { "--:".to_string() })
            .collect();
        s += &line(&seps);
        for r in &self.rows {
            s += &line(r);
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Schema(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("cells are UTF-8"))
    }

    /// Re-reads CSV text written by [`Table::to_csv`].
    pub fn from_csv(id: TableId, title: &str, text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            id,
            title: title.to_string(),
            header,
            rows,
        })
    }
}

pub fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| format!("{:.1}", v * 100.0))
}

pub fn fmt_bleu(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |v| format!("{:.2}", v * 100.0))
}

/// Signed percentage-point gap `hallu - all`; a gap that rounds to zero
/// prints unsigned.
pub fn fmt_delta(hallu: Option<f64>, all: Option<f64>) -> String {
    match (hallu, all) {
        (Some(h), Some(a)) => {
            let d = ((h - a) * 1000.0).round() / 10.0;
            if d == 0.0 {
                "0.0".into()
            } else {
                format!("{d:+.1}")
            }
        }
        _ => NA.into(),
    }
}

pub fn layer_label(layer: usize) -> String {
    if layer == 0 {
        "Emb.".into()
    } else {
        layer.to_string()
    }
}

fn cell(r: &ProbeSuiteResult, s: Section, l: usize, v: Option<DecoderVariant>, sub: Subset) -> Option<&ProbeCell> {
    r.table.get(s, l, v, sub)
}

fn show(c: Option<&ProbeCell>, f: impl Fn(&ProbeCell) -> String) -> String {
    c.map_or_else(|| MISSING.to_string(), f)
}

fn gap(h: Option<&ProbeCell>, a: Option<&ProbeCell>, m: fn(&ProbeCell) -> Option<f64>) -> String {
    match (h, a) {
        (Some(h), Some(a)) => fmt_delta(m(h), m(a)),
        _ => MISSING.into(),
    }
}

fn has_in_domain(r: &ProbeSuiteResult, s: Section) -> bool {
    r.table.section(s).any(|c| c.subset == Subset::InDomain)
}

fn encoder_aligned(r: &ProbeSuiteResult) -> Option<Table> {
    let s = Section::EncoderAligned;
    let layers = r.table.layers(s);
    if layers.is_empty() {
        return None;
    }
    let subsets: Vec<(Subset, &str)> = [(Subset::InDomain, "In-domain"), (Subset::All, "All"), (Subset::Hallu, "Hallu.")]
        .into_iter()
        .filter(|(sub, _)| *sub != Subset::InDomain || has_in_domain(r, s))
        .collect();
    let mut header = vec!["Layer".to_string()];
    for (_, name) in &subsets {
        header.push(format!("{name} BLEU"));
        header.push(format!("{name} Acc."));
    }
    header.push("Δ Acc.".into());
    let rows = layers
        .iter()
        .map(|&l| {
            let mut row = vec![layer_label(l)];
            for (sub, _) in &subsets {
                let c = cell(r, s, l, None, *sub);
                row.push(show(c, |c| fmt_bleu(c.bleu)));
                row.push(show(c, |c| fmt_pct(c.accuracy)));
            }
            row.push(gap(cell(r, s, l, None, Subset::Hallu), cell(r, s, l, None, Subset::All), |c| c.accuracy));
            row
        })
        .collect();
    Some(Table {
        id: TableId::EncoderAligned,
        title: TableId::EncoderAligned.title().into(),
        header,
        rows,
    })
}

fn decoder(r: &ProbeSuiteResult) -> Option<Table> {
    let s = Section::Decoder;
    let layers = r.table.layers(s);
    if layers.is_empty() {
        return None;
    }
    let in_domain = has_in_domain(r, s);
    let mut header = vec!["Layer".to_string()];
    let groups = [
        (DecoderVariant::Standard, "Standard"),
        (DecoderVariant::NoSelfAttn, "No self-att."),
        (DecoderVariant::NoCrossAttn, "No cross-att."),
    ];
    for (v, name) in groups {
        if v == DecoderVariant::Standard && in_domain {
            header.push(format!("{name} In-domain"));
        }
        header.push(format!("{name} All"));
        header.push(format!("{name} Hallu."));
        header.push(format!("{name} Δ"));
    }
    let rows = layers
        .iter()
        .map(|&l| {
            let mut row = vec![layer_label(l)];
            for (v, _) in groups {
                let get = |sub| cell(r, s, l, Some(v), sub);
                if v == DecoderVariant::Standard && in_domain {
                    row.push(show(get(Subset::InDomain), |c| fmt_pct(c.accuracy)));
                }
                row.push(show(get(Subset::All), |c| fmt_pct(c.accuracy)));
                row.push(show(get(Subset::Hallu), |c| fmt_pct(c.accuracy)));
                row.push(gap(get(Subset::Hallu), get(Subset::All), |c| c.accuracy));
            }
            row
        })
        .collect();
    Some(Table {
        id: TableId::Decoder,
        title: TableId::Decoder.title().into(),
        header,
        rows,
    })
}

fn encoder_no_cross(r: &ProbeSuiteResult) -> Option<Table> {
    let s = Section::EncoderNoCross;
    let layers = r.table.layers(s);
    if layers.is_empty() {
        return None;
    }
    let header = ["Layer", "All BLEU", "All 1-BLEU", "Hallu. BLEU", "Hallu. 1-BLEU", "Δ 1-BLEU"]
        .map(String::from)
        .to_vec();
    let rows = layers
        .iter()
        .map(|&l| {
            let all = cell(r, s, l, None, Subset::All);
            let hallu = cell(r, s, l, None, Subset::Hallu);
            vec![
                layer_label(l),
                show(all, |c| fmt_bleu(c.bleu)),
                show(all, |c| fmt_bleu(c.unigram_bleu)),
                show(hallu, |c| fmt_bleu(c.bleu)),
                show(hallu, |c| fmt_bleu(c.unigram_bleu)),
                gap(hallu, all, |c| c.unigram_bleu),
            ]
        })
        .collect();
    Some(Table {
        id: TableId::EncoderNoCross,
        title: TableId::EncoderNoCross.title().into(),
        header,
        rows,
    })
}

fn detection(d: &[DetectionSummary]) -> Option<Table> {
    if d.is_empty() {
        return None;
    }
    Some(Table {
        id: TableId::Detection,
        title: TableId::Detection.title().into(),
        header: vec!["Split".into(), "Hallucinated".into(), "Threshold".into()],
        rows: d
            .iter()
            .map(|s| vec![s.split.clone(), s.stats.clone(), format!("{}", s.threshold)])
            .collect(),
    })
}

fn check(probes: Option<&ProbeSuiteResult>, detections: &[DetectionSummary]) -> Result<()> {
    for d in detections {
        if d.stats != format!("{}/{}", d.hallucinated, d.total) || d.indices.len() != d.hallucinated {
            return Err(ReportError::Schema(format!("detection summary for {} is inconsistent", d.split)));
        }
    }
    if let Some(p) = probes {
        for c in &p.table.cells {
            for v in [c.accuracy, c.bleu, c.unigram_bleu].into_iter().flatten() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ReportError::Schema(format!("value {v} outside [0, 1] in {c:?}")));
                }
            }
            if (c.section == Section::Decoder) != c.variant.is_some() {
                return Err(ReportError::Schema(format!("variant does not match section in {c:?}")));
            }
        }
    }
    Ok(())
}

/// Everything a report consists of, as in-memory text.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub tables: Vec<Table>,
    pub markdown: String,
    pub json: String,
    /// `(file name, svg text)`.
    pub plots: Vec<(String, String)>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    meta: &'a RunMeta,
    tables: &'a [Table],
    bootstrap: &'a [LayerBootstrap],
    detection: &'a [DetectionSummary],
}

/// Renders the requested tables. Tables without underlying results are
/// skipped; if none remain the report is empty and refused.
pub fn render(probes: Option<&ProbeSuiteResult>, detections: &[DetectionSummary], spec: &ReportSpec) -> Result<Rendered> {
    check(probes, detections)?;
    let mut tables = Vec::new();
    for id in &spec.tables {
        let t = match id {
            TableId::EncoderAligned => probes.and_then(encoder_aligned),
            TableId::Decoder => probes.and_then(decoder),
            TableId::EncoderNoCross => probes.and_then(encoder_no_cross),
            TableId::Detection => detection(detections),
        };
        tables.extend(t);
    }
    if tables.is_empty() {
        return Err(ReportError::NothingToReport);
    }
    let mut md = String::from("# Hallucination probing report\n\n");
    let m = &spec.meta;
    let _ = writeln!(md, "- seed: {}\n- config: `{}`\n- model: `{}`\n", m.seed, m.config_hash, m.model_checksum);
    for t in &tables {
        md += &t.to_markdown();
        md.push('\n');
    }
    let boots: &[LayerBootstrap] = probes.map_or(&[], |p| &p.bootstrap);
    if !boots.is_empty() {
        md += "### Bootstrap of the Hallu. - All accuracy gap\n\n| Layer | Δ Acc. | 95% CI |\n| :-- | --: | --: |\n";
        for b in boots {
            let BootstrapCi { delta, lo, hi, .. } = b.accuracy;
            let _ = writeln!(md, "| {} | {:+.1} | [{:+.1}, {:+.1}] |", layer_label(b.layer), delta * 100.0, lo * 100.0, hi * 100.0);
        }
        md.push('\n');
    }
    let json = serde_json::to_string_pretty(&ReportJson {
        meta: m,
        tables: &tables,
        bootstrap: boots,
        detection: detections,
    })
    .expect("report serializes")
        + "\n";
    let mut plots = Vec::new();
    if spec.plots {
        if let Some(p) = probes {
            let curves = [
                (Section::EncoderAligned, "encoder_accuracy.svg", "Aligned encoder probe accuracy"),
                (Section::EncoderNoCross, "encoder_no_cross_unigram_bleu.svg", "Encoder probe 1-BLEU without cross-attention"),
            ];
            for (section, name, title) in curves {
                if let Some(svg) = plot_layerwise(p, section, title) {
                    plots.push((name.to_string(), svg));
                }
            }
        }
    }
    Ok(Rendered {
        tables,
        markdown: md,
        json,
        plots,
    })
}

/// Writes `report.md`, `report.json`, one CSV per table and the plots.
pub fn write_report(dir: &Path, r: &Rendered) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<(String, String)> = vec![("report.md".into(), r.markdown.clone()), ("report.json".into(), r.json.clone())];
    for t in &r.tables {
        files.push((format!("{}.csv", t.id.file_stem()), t.to_csv()?));
    }
    files.extend(r.plots.iter().cloned());
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD_L: f64 = 56.0;
const PAD_R: f64 = 120.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 44.0;

fn metric_of(section: Section) -> fn(&ProbeCell) -> Option<f64> {
    match section {
        Section::EncoderNoCross => |c| c.unigram_bleu,
        _ => |c| c.accuracy,
    }
}

/// Layer-versus-metric curves, one per subset, as SVG text. The gap
/// between Hallu. and All at the deepest layer is annotated.
pub fn plot_layerwise(r: &ProbeSuiteResult, section: Section, title: &str) -> Option<String> {
    let layers = r.table.layers(section);
    if layers.is_empty() {
        return None;
    }
    let metric = metric_of(section);
    let variant = (section == Section::Decoder).then_some(DecoderVariant::Standard);
    let n = layers.len();
    let x = |i: usize| {
        if n == 1 {
            PAD_L + (W - PAD_L - PAD_R) / 2.0
        } else {
            PAD_L + (W - PAD_L - PAD_R) * i as f64 / (n - 1) as f64
        }
    };
    let y = |v: f64| PAD_T + (H - PAD_T - PAD_B) * (1.0 - v);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, yb, yt) = (PAD_L, W - PAD_R, y(0.0), y(1.0));
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{yb:.2}" x2="{x1:.2}" y2="{yb:.2}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{yb:.2}" x2="{x0:.2}" y2="{yt:.2}" stroke="black"/>"#);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let ty = y(tick);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{ty:.2}" x2="{x0:.2}" y2="{ty:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.0}</text>"#,
            x0 - 6.0,
            ty + 4.0,
            tick * 100.0
        );
    }
    for (i, &l) in layers.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, x(i), yb + 16.0, layer_label(l));
    }
    let series = [
        (Subset::InDomain, "In-domain", "#2b8a3e"),
        (Subset::All, "All", "#1c5fb0"),
        (Subset::Hallu, "Hallu.", "#c92a2a"),
    ];
    let mut legend_y = PAD_T + 8.0;
    for (sub, name, color) in series {
        let pts: Vec<(f64, f64)> = layers
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| r.table.get(section, l, variant, sub).and_then(metric).map(|v| (x(i), y(v))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for (a, b) in &pts {
            let _ = writeln!(s, r#"<circle cx="{a:.2}" cy="{b:.2}" r="3" fill="{color}"/>"#);
        }
        let lx = W - PAD_R + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{legend_y:.2}" x2="{:.2}" y2="{legend_y:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{name}</text>"#, lx + 20.0, legend_y + 4.0);
        legend_y += 16.0;
    }
    let last = *layers.last().expect("non-empty");
    let d = fmt_delta(
        r.table.get(section, last, variant, Subset::Hallu).and_then(metric),
        r.table.get(section, last, variant, Subset::All).and_then(metric),
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">Δ at {}: {}</text>"#, W - PAD_R + 12.0, legend_y + 12.0, layer_label(last), d);
    s += "</svg>\n";
    Some(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
