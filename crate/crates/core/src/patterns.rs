//! Bit-mask detectors for the ARM (A32) instruction patterns that separate optimization levels:
//! prologue register pushes, compare-and-branch idioms and frame-pointer relative accesses.
//!
//! All detectors are pure and total over `u32`.

use serde::{Deserialize, Serialize};

pub const COND_EQ: u32 = 0x0;
pub const COND_NE: u32 = 0x1;
pub const COND_AL: u32 = 0xE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatternKind {
    FunctionHeaderO0,
    FunctionHeaderOpt,
    CmpBeqIdiom,
    CmpBneIdiom,
    FramePointerAccess,
}

impl PatternKind {
    pub const ALL: [PatternKind; 5] = [
        PatternKind::FunctionHeaderO0,
        PatternKind::FunctionHeaderOpt,
        PatternKind::CmpBeqIdiom,
        PatternKind::CmpBneIdiom,
        PatternKind::FramePointerAccess,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternTag {
    pub kind: PatternKind,
    /// Index of the first evidence word within the scanned window.
    pub offset: usize,
    pub evidence: Vec<u32>,
    /// Decoded form, e.g. `STMFD SP!,{R11,LR}` or `CMP; BEQ`.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushDecode {
    pub register_list: u16,
    /// `None` for pushes that are neither header shape (e.g. `{LR}` only).
    pub kind: Option<PatternKind>,
}

impl PushDecode {
    pub fn mnemonic(&self) -> String {
        format!("STMFD SP!,{{{}}}", register_names(self.register_list).join(","))
    }
}

pub fn register_name(r: u32) -> String {
    match r {
        13 => "SP".into(),
        14 => "LR".into(),
        15 => "PC".into(),
        r => format!("R{r}"),
    }
}

pub fn register_names(list: u16) -> Vec<String> {
    (0..16).filter(|r| list >> r & 1 == 1).map(register_name).collect()
}

pub fn condition(word: u32) -> u32 {
    word >> 28
}

/// Unconditional `STMFD SP!, {..}` (STMDB, writeback, base SP) with a non-empty list.
pub fn decode_push(word: u32) -> Option<PushDecode> {
    if word & 0xFFFF_0000 != 0xE92D_0000 {
        return None;
    }
    let list = (word & 0xFFFF) as u16;
    if list == 0 {
        return None;
    }
    let kind = if list & (1 << 11) != 0 {
        Some(PatternKind::FunctionHeaderO0)
    } else if list & 0x07F0 != 0 {
        Some(PatternKind::FunctionHeaderOpt)
    } else {
        None
    };
    Some(PushDecode {
        register_list: list,
        kind,
    })
}

/// `CMP` (data-processing opcode 1010, S set) under condition `cond`, immediate or register
/// operand. Excludes the multiply / extra load-store space that shares the top bits.
pub fn is_cmp(word: u32, cond: u32) -> bool {
    condition(word) == cond && word & 0x0DF0_0000 == 0x0150_0000 && word & 0x0200_0090 != 0x0000_0090
}

/// `B` (not `BL`) under condition `cond`.
pub fn is_branch(word: u32, cond: u32) -> bool {
    condition(word) == cond && word & 0x0F00_0000 == 0x0A00_0000
}

/// First `CMP [CMPEQ] BEQ|BNE` run in the window.
pub fn detect_branch_idiom(window: &[u32]) -> Option<PatternTag> {
    for i in 0..window.len() {
        if !is_cmp(window[i], COND_AL) {
            continue;
        }
        let mut j = i + 1;
        let mut detail = String::from("CMP; ");
        if j < window.len() && is_cmp(window[j], COND_EQ) {
            detail.push_str("CMPEQ; ");
            j += 1;
        }
        let Some(&br) = window.get(j) else { continue };
        let kind = if is_branch(br, COND_EQ) {
            detail.push_str("BEQ");
            PatternKind::CmpBeqIdiom
        } else if is_branch(br, COND_NE) {
            detail.push_str("BNE");
            PatternKind::CmpBneIdiom
        } else {
            continue;
        };
        return Some(PatternTag {
            kind,
            offset: i,
            evidence: window[i..=j].to_vec(),
            detail,
        });
    }
    None
}

/// Single-register `LDR`/`STR` (word or byte, immediate offset) based on R11.
pub fn detect_frame_access(word: u32) -> bool {
    condition(word) != 0xF && word & 0x0E00_0000 == 0x0400_0000 && (word >> 16) & 0xF == 11
}

fn frame_access_detail(word: u32) -> String {
    let op = match (word >> 20 & 1, word >> 22 & 1) {
        (1, 0) => "LDR",
        (1, _) => "LDRB",
        (0, 0) => "STR",
        _ => "STRB",
    };
    let sign = if word >> 23 & 1 == 1 { "" } else { "-" };
    format!("{op} {},[R11,#{sign}0x{:X}]", register_name(word >> 12 & 0xF), word & 0xFFF)
}

/// Every detector applied to a window: header pushes and frame accesses per word, plus the
/// first branch idiom.
pub fn scan_window(window: &[u32]) -> Vec<PatternTag> {
    let mut tags = Vec::new();
    for (i, &w) in window.iter().enumerate() {
        if let Some(p) = decode_push(w) {
            if let Some(kind) = p.kind {
                tags.push(PatternTag {
                    kind,
                    offset: i,
                    evidence: vec![w],
                    detail: p.mnemonic(),
                });
            }
        }
        if detect_frame_access(w) {
            tags.push(PatternTag {
                kind: PatternKind::FramePointerAccess,
                offset: i,
                evidence: vec![w],
                detail: frame_access_detail(w),
            });
        }
    }
    tags.extend(detect_branch_idiom(window));
    tags.sort_by_key(|t| (t.offset, t.kind));
    tags
}
