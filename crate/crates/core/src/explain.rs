//! Maps strong pooled activations back to instruction addresses and tags the instruction windows
//! they cover with known ARM patterns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elf::{load_code_image, split_blocks, ElfError, InstructionBlock, BLOCK_WORDS};
use crate::eval::EvalError;
use crate::model::{ModelError, ModelParams};
use crate::nn::Scalar;
use crate::patterns::{scan_window, PatternKind, PatternTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSite {
    pub kernel_length: usize,
    pub filter_index: usize,
    pub score: f64,
    pub position: usize,
    /// `base_offset + 4 * position`.
    pub address: u64,
    /// Instruction words starting at `position`, as many as the longest kernel (clipped at the
    /// block end). This is the receptive field the filter saw.
    pub window: Vec<u32>,
    pub tags: Vec<PatternTag>,
}

/// Filters whose pooled score exceeds `threshold`, strongest first. Equal scores keep
/// bank-then-filter order.
pub fn activation_report<T: Scalar>(
    params: &ModelParams<T>,
    block: &InstructionBlock,
    threshold: f64,
) -> Result<Vec<ScoredSite>, ModelError> {
    let (_, trace) = params.forward(block, true)?;
    let trace = trace.expect("capture requested");
    let span = params.hyper().max_kernel_length();
    let mut sites: Vec<ScoredSite> = trace
        .entries
        .iter()
        .filter(|e| e.score > threshold)
        .map(|e| {
            let end = (e.position + span).min(BLOCK_WORDS);
            let window: Vec<u32> = (e.position..end).map(|i| block.word(i)).collect();
            ScoredSite {
                kernel_length: e.kernel_length,
                filter_index: e.filter_index,
                score: e.score,
                position: e.position,
                address: block.base_offset + 4 * e.position as u64,
                tags: scan_window(&window),
                window,
            }
        })
        .collect();
    sites.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(sites)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    pub path: String,
    pub blocks: usize,
    /// Total sites above threshold across all blocks.
    pub site_count: usize,
    /// Strongest sites, at most the requested number.
    pub top_sites: Vec<ScoredSite>,
    /// Tag frequencies over every site window, all kinds present.
    pub tag_counts: BTreeMap<PatternKind, u64>,
}

/// Activation report over every block of a file.
pub fn explain_file<T: Scalar>(
    params: &ModelParams<T>,
    path: &Path,
    threshold: f64,
    min_fill: usize,
    all_exec: bool,
    top: usize,
) -> Result<FileReport, EvalError> {
    let elf_err = |source| EvalError::Elf {
        path: path.display().to_string(),
        source,
    };
    let (_, image) = load_code_image(path, all_exec).map_err(elf_err)?;
    let blocks = split_blocks(&image, min_fill);
    if blocks.is_empty() {
        return Err(elf_err(ElfError::NoCode));
    }
    let mut sites = Vec::new();
    for b in &blocks {
        sites.extend(activation_report(params, b, threshold)?);
    }
    sites.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut tag_counts: BTreeMap<PatternKind, u64> = PatternKind::ALL.iter().map(|&k| (k, 0)).collect();
    for t in sites.iter().flat_map(|s| &s.tags) {
        *tag_counts.get_mut(&t.kind).expect("all kinds") += 1;
    }
    let site_count = sites.len();
    sites.truncate(top);
    Ok(FileReport {
        path: path.display().to_string(),
        blocks: blocks.len(),
        site_count,
        top_sites: sites,
        tag_counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagComparison {
    pub kind: PatternKind,
    pub count_a: u64,
    pub count_b: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub a: FileReport,
    pub b: FileReport,
    /// Counts of every tag kind in both files.
    pub summary: Vec<TagComparison>,
    /// The subset of `summary` where the counts differ.
    pub differences: Vec<TagComparison>,
}

pub fn diff_reports(a: FileReport, b: FileReport) -> DiffReport {
    let summary: Vec<TagComparison> = PatternKind::ALL
        .iter()
        .map(|&kind| TagComparison {
            kind,
            count_a: a.tag_counts.get(&kind).copied().unwrap_or(0),
            count_b: b.tag_counts.get(&kind).copied().unwrap_or(0),
        })
        .collect();
    let differences = summary.iter().copied().filter(|c| c.count_a != c.count_b).collect();
    DiffReport {
        a,
        b,
        summary,
        differences,
    }
}

/// Explains two files and tabulates how their pattern frequencies differ.
#[allow(clippy::too_many_arguments)]
pub fn compare_files<T: Scalar>(
    params: &ModelParams<T>,
    path_a: &Path,
    path_b: &Path,
    threshold: f64,
    min_fill: usize,
    all_exec: bool,
    top: usize,
) -> Result<DiffReport, EvalError> {
    let (a, b) = rayon::join(
        || explain_file(params, path_a, threshold, min_fill, all_exec, top),
        || explain_file(params, path_b, threshold, min_fill, all_exec, top),
    );
    Ok(diff_reports(a?, b?))
}

/// One line per site in the `(0x484, 6.33)` annotation style, followed by decoded tags.
pub fn render_sites(sites: &[ScoredSite]) -> String {
    let mut out = String::new();
    for s in sites {
        let _ = write!(out, "(0x{:x}, {:.2}) k={} f={}", s.address, s.score, s.kernel_length, s.filter_index);
        for t in &s.tags {
            let _ = write!(out, " [{:?}: {}]", t.kind, t.detail);
        }
        out.push('\n');
    }
    out
}

pub fn render_diff(d: &DiffReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "A: {} ({} sites)", d.a.path, d.a.site_count);
    let _ = writeln!(out, "B: {} ({} sites)", d.b.path, d.b.site_count);
    let _ = writeln!(out, "{:<20} {:>8} {:>8}", "pattern", "A", "B");
    for c in &d.summary {
        let mark = if c.count_a != c.count_b { " *" } else { "" };
        let _ = writeln!(out, "{:<20} {:>8} {:>8}{mark}", format!("{:?}", c.kind), c.count_a, c.count_b);
    }
    out
}
