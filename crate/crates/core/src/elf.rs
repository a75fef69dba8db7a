//! ELF32 ARM object parsing and code-block extraction.
//!
//! Only little-endian 32-bit ARM (`EM_ARM`) objects are accepted. The code image is the raw
//! content of `.text` (or of every executable section, in file order), truncated to a whole number
//! of 4-byte instructions, then cut into fixed 4096-byte blocks for the model.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Instructions per model input block.
pub const BLOCK_WORDS: usize = 1024;
/// Bytes per model input block.
pub const BLOCK_BYTES: usize = BLOCK_WORDS * 4;
/// Default minimum real content for a trailing partial block to be kept.
pub const DEFAULT_MIN_FILL: usize = 1024;

pub const EM_ARM: u16 = 40;
const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];
const EHDR32_SIZE: usize = 52;
const SHDR32_SIZE: usize = 40;
const SHT_NOBITS: u32 = 8;
pub const SHF_EXECINSTR: u32 = 0x4;

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("not an ELF file (bad magic)")]
    NotElf,
    #[error("unsupported target: {0}")]
    UnsupportedArch(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed ELF: {0}")]
    Malformed(String),
    #[error("no code section found")]
    NoCode,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileType {
    Relocatable,
    Executable,
    Shared,
    Core,
    Other(u16),
}

impl FileType {
    fn from_raw(v: u16) -> Self {
        match v {
            1 => FileType::Relocatable,
            2 => FileType::Executable,
            3 => FileType::Shared,
            4 => FileType::Core,
            other => FileType::Other(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub kind: u32,
    pub flags: u32,
    pub offset: u32,
    pub size: u32,
    pub address: u32,
}

impl SectionInfo {
    pub fn is_executable(&self) -> bool {
        self.flags & SHF_EXECINSTR != 0
    }

    fn occupies_file(&self) -> bool {
        self.kind != SHT_NOBITS
    }
}

/// Header and section metadata of a parsed object file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectFileInfo {
    pub path: Option<String>,
    /// 32 for ELFCLASS32 (the only accepted class).
    pub class: u8,
    pub little_endian: bool,
    pub machine: u16,
    pub file_type: FileType,
    /// Set when the file is not `ET_REL`; such files are still processed.
    pub not_relocatable: bool,
    pub sections: Vec<SectionInfo>,
}

/// Raw executable bytes of an object, truncated to a multiple of 4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeImage {
    pub bytes: Vec<u8>,
    pub source: String,
    /// Offset of the image start within its (first) section.
    pub origin_offset: u64,
    /// Trailing bytes dropped to reach 4-byte alignment.
    pub truncated: usize,
    /// Names of the sections that contributed, in order.
    pub sections: Vec<String>,
}

impl CodeImage {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// 1024 ARM words taken from a code image, zero padded when it is the final partial window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionBlock {
    bytes: Vec<u8>,
    pub base_offset: u64,
    pub pad_len: usize,
}

impl InstructionBlock {
    /// Builds a block from up to 4096 bytes; shorter input is zero padded.
    ///
    /// Panics if `content` is longer than a block.
    pub fn from_content(content: &[u8], base_offset: u64) -> Self {
        assert!(content.len() <= BLOCK_BYTES, "block content exceeds {BLOCK_BYTES} bytes");
        let mut bytes = vec![0u8; BLOCK_BYTES];
        bytes[..content.len()].copy_from_slice(content);
        InstructionBlock {
            bytes,
            base_offset,
            pad_len: BLOCK_BYTES - content.len(),
        }
    }

    pub fn from_words(words: &[u32], base_offset: u64) -> Self {
        let content: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        Self::from_content(&content, base_offset)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn word(&self, index: usize) -> u32 {
        let b = &self.bytes[index * 4..index * 4 + 4];
        u32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    pub fn words(&self) -> impl Iterator<Item = u32> + '_ {
        self.bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Real (unpadded) bytes.
    pub fn content(&self) -> &[u8] {
        &self.bytes[..BLOCK_BYTES - self.pad_len]
    }
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn u16(&self, at: usize) -> Option<u16> {
        self.data
            .get(at..at + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, at: usize) -> Option<u32> {
        self.data
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn truncated(what: impl Into<String>) -> ElfError {
    ElfError::Truncated(what.into())
}

/// Parses ELF header and section table. Total over arbitrary input: every byte string yields
/// either metadata or a typed error.
pub fn parse_object(bytes: &[u8]) -> Result<ObjectFileInfo, ElfError> {
    if bytes.len() < 4 || bytes[..4] != ELF_MAGIC {
        return Err(ElfError::NotElf);
    }
    if bytes.len() < 16 {
        return Err(truncated("e_ident"));
    }
    match bytes[4] {
        1 => {}
        2 => return Err(ElfError::UnsupportedArch("ELF64 class".into())),
        c => return Err(ElfError::UnsupportedArch(format!("ELF class {c}"))),
    }
    match bytes[5] {
        1 => {}
        2 => return Err(ElfError::UnsupportedArch("big-endian".into())),
        d => return Err(ElfError::UnsupportedArch(format!("data encoding {d}"))),
    }
    if bytes.len() < EHDR32_SIZE {
        return Err(truncated("ELF header"));
    }
    let r = Reader { data: bytes };
    // Header reads below are in bounds: length >= 52 checked above.
    let machine = r.u16(18).unwrap();
    if machine != EM_ARM {
        return Err(ElfError::UnsupportedArch(format!("machine {machine}, expected ARM (40)")));
    }
    let file_type = FileType::from_raw(r.u16(16).unwrap());
    let shoff = r.u32(32).unwrap() as usize;
    let shentsize = r.u16(46).unwrap() as usize;
    let mut shnum = r.u16(48).unwrap() as usize;
    let mut shstrndx = r.u16(50).unwrap() as usize;

    let mut sections = Vec::new();
    if shoff != 0 {
        if shentsize < SHDR32_SIZE {
            return Err(ElfError::Malformed(format!("section header entry size {shentsize}")));
        }
        let header_at = |i: usize| -> Result<usize, ElfError> {
            let start = i
                .checked_mul(shentsize)
                .and_then(|o| o.checked_add(shoff))
                .ok_or_else(|| truncated("section header table"))?;
            match start.checked_add(SHDR32_SIZE) {
                Some(end) if end <= bytes.len() => Ok(start),
                _ => Err(truncated(format!("section header {i}"))),
            }
        };
        // Extended numbering: counts that overflow the 16-bit fields live in section 0.
        if shnum == 0 || shstrndx == 0xffff {
            let h0 = header_at(0)?;
            if shnum == 0 {
                shnum = r.u32(h0 + 20).unwrap() as usize;
            }
            if shstrndx == 0xffff {
                shstrndx = r.u32(h0 + 24).unwrap() as usize;
            }
        }
        let table_end = shnum
            .checked_mul(shentsize)
            .and_then(|n| n.checked_add(shoff));
        match table_end {
            Some(end) if end <= bytes.len() => {}
            _ => return Err(truncated("section header table")),
        }
        let mut raw = Vec::with_capacity(shnum);
        for i in 0..shnum {
            let h = header_at(i)?;
            let s = SectionInfo {
                name: String::new(),
                kind: r.u32(h + 4).unwrap(),
                flags: r.u32(h + 8).unwrap(),
                address: r.u32(h + 12).unwrap(),
                offset: r.u32(h + 16).unwrap(),
                size: r.u32(h + 20).unwrap(),
            };
            let name_off = r.u32(h).unwrap() as usize;
            if s.occupies_file() {
                let end = (s.offset as u64) + (s.size as u64);
                if end > bytes.len() as u64 {
                    return Err(truncated(format!(
                        "section {i} spans {:#x}..{end:#x} beyond file size {:#x}",
                        s.offset,
                        bytes.len()
                    )));
                }
            }
            raw.push((name_off, s));
        }
        let strtab = if shstrndx != 0 && shstrndx < raw.len() {
            let s = &raw[shstrndx].1;
            if s.occupies_file() {
                Some(&bytes[s.offset as usize..(s.offset as usize + s.size as usize)])
            } else {
                None
            }
        } else {
            None
        };
        for (name_off, mut s) in raw {
            if let Some(tab) = strtab {
                s.name = read_cstr(tab, name_off);
            }
            sections.push(s);
        }
    }

    Ok(ObjectFileInfo {
        path: None,
        class: 32,
        little_endian: true,
        machine,
        file_type,
        not_relocatable: file_type != FileType::Relocatable,
        sections,
    })
}

fn read_cstr(tab: &[u8], at: usize) -> String {
    match tab.get(at..) {
        Some(rest) => {
            let end = rest.iter().position(|&b| b == 0).unwrap_or(rest.len());
            String::from_utf8_lossy(&rest[..end]).into_owned()
        }
        None => String::new(),
    }
}

/// Collects code bytes: `.text` by default, or every executable section when `all_exec` is set.
pub fn extract_code(
    info: &ObjectFileInfo,
    bytes: &[u8],
    all_exec: bool,
) -> Result<CodeImage, ElfError> {
    let chosen: Vec<&SectionInfo> = info
        .sections
        .iter()
        .filter(|s| s.occupies_file() && s.size > 0)
        .filter(|s| {
            if all_exec {
                s.is_executable()
            } else {
                s.name == ".text"
            }
        })
        .collect();
    if chosen.is_empty() {
        return Err(ElfError::NoCode);
    }
    let mut code = Vec::new();
    for s in &chosen {
        let start = s.offset as usize;
        let end = start + s.size as usize;
        let data = bytes
            .get(start..end)
            .ok_or_else(|| truncated(format!("section {}", s.name)))?;
        code.extend_from_slice(data);
    }
    let truncated = code.len() % 4;
    code.truncate(code.len() - truncated);
    if code.is_empty() {
        return Err(ElfError::NoCode);
    }
    Ok(CodeImage {
        bytes: code,
        source: info.path.clone().unwrap_or_else(|| "<memory>".to_string()),
        origin_offset: 0,
        truncated,
        sections: chosen.iter().map(|s| s.name.clone()).collect(),
    })
}

/// Cuts an image into consecutive 4096-byte blocks. A final partial window is zero padded when it
/// holds at least `min_fill` real bytes, otherwise dropped.
pub fn split_blocks(image: &CodeImage, min_fill: usize) -> Vec<InstructionBlock> {
    image
        .bytes
        .chunks(BLOCK_BYTES)
        .enumerate()
        .filter(|(_, chunk)| chunk.len() == BLOCK_BYTES || chunk.len() >= min_fill)
        .map(|(i, chunk)| {
            InstructionBlock::from_content(chunk, image.origin_offset + (i * BLOCK_BYTES) as u64)
        })
        .collect()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, ElfError> {
    std::fs::read(path).map_err(|source| ElfError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads, parses and extracts the code image of an object file on disk.
pub fn load_code_image(path: &Path, all_exec: bool) -> Result<(ObjectFileInfo, CodeImage), ElfError> {
    let bytes = read_file(path)?;
    let mut info = parse_object(&bytes)?;
    info.path = Some(path.display().to_string());
    let image = extract_code(&info, &bytes, all_exec)?;
    Ok((info, image))
}

/// Writes minimal little-endian ELF32 objects. Used to build fixtures and synthetic corpora.
#[derive(Debug, Clone)]
pub struct ObjectBuilder {
    machine: u16,
    file_type: u16,
    sections: Vec<(String, u32, Vec<u8>)>,
}

impl Default for ObjectBuilder {
    fn default() -> Self {
        ObjectBuilder {
            machine: EM_ARM,
            file_type: 1,
            sections: Vec::new(),
        }
    }
}

impl ObjectBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn machine(mut self, machine: u16) -> Self {
        self.machine = machine;
        self
    }

    pub fn file_type(mut self, file_type: u16) -> Self {
        self.file_type = file_type;
        self
    }

    /// Adds a PROGBITS section with the given flags.
    pub fn section(mut self, name: &str, flags: u32, data: &[u8]) -> Self {
        self.sections.push((name.to_string(), flags, data.to_vec()));
        self
    }

    /// Adds an executable `.text` section.
    pub fn text(self, data: &[u8]) -> Self {
        self.section(".text", SHF_EXECINSTR | 0x2, data)
    }

    pub fn text_words(self, words: &[u32]) -> Self {
        let data: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        self.text(&data)
    }

    pub fn build(&self) -> Vec<u8> {
        let mut shstrtab = vec![0u8];
        let mut name_offsets = Vec::new();
        for (name, _, _) in &self.sections {
            name_offsets.push(shstrtab.len() as u32);
            shstrtab.extend_from_slice(name.as_bytes());
            shstrtab.push(0);
        }
        let shstrtab_name = shstrtab.len() as u32;
        shstrtab.extend_from_slice(b".shstrtab\0");

        let mut out = vec![0u8; EHDR32_SIZE];
        let mut placed = Vec::new();
        for (_, _, data) in &self.sections {
            while !out.len().is_multiple_of(4) {
                out.push(0);
            }
            placed.push(out.len() as u32);
            out.extend_from_slice(data);
        }
        let strtab_off = out.len() as u32;
        out.extend_from_slice(&shstrtab);
        while !out.len().is_multiple_of(4) {
            out.push(0);
        }
        let shoff = out.len() as u32;
        let shnum = self.sections.len() as u16 + 2;

        out.extend_from_slice(&[0u8; SHDR32_SIZE]);
        for (i, (_, flags, data)) in self.sections.iter().enumerate() {
            push_shdr(&mut out, name_offsets[i], 1, *flags, placed[i], data.len() as u32);
        }
        push_shdr(&mut out, shstrtab_name, 3, 0, strtab_off, shstrtab.len() as u32);

        out[..4].copy_from_slice(&ELF_MAGIC);
        out[4] = 1;
        out[5] = 1;
        out[6] = 1;
        out[16..18].copy_from_slice(&self.file_type.to_le_bytes());
        out[18..20].copy_from_slice(&self.machine.to_le_bytes());
        out[20..24].copy_from_slice(&1u32.to_le_bytes());
        out[32..36].copy_from_slice(&shoff.to_le_bytes());
        out[36..40].copy_from_slice(&0x0500_0000u32.to_le_bytes());
        out[40..42].copy_from_slice(&(EHDR32_SIZE as u16).to_le_bytes());
        out[46..48].copy_from_slice(&(SHDR32_SIZE as u16).to_le_bytes());
        out[48..50].copy_from_slice(&shnum.to_le_bytes());
        out[50..52].copy_from_slice(&(shnum - 1).to_le_bytes());
        out
    }
}

fn push_shdr(out: &mut Vec<u8>, name: u32, kind: u32, flags: u32, offset: u32, size: u32) {
    for v in [name, kind, flags, 0, offset, size, 0, 0, 4, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
