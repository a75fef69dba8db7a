#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use bineye::corpus::{CorpusManifest, OptLevel};
use bineye::elf::ObjectBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod cgen;

/// Flags used for each class when compiling the synthetic corpus.
pub const LEVEL_FLAGS: [(&str, OptLevel); 4] = [
    ("-O0", OptLevel::O0),
    ("-O1", OptLevel::O1),
    ("-O2", OptLevel::O2O3),
    ("-Os", OptLevel::Os),
];

/// An ARM (A32) cross compiler: `BINEYE_CC` if set (extra words are leading arguments),
/// otherwise clang or an arm-linux-gnueabi gcc, whichever compiles a probe.
#[derive(Debug, Clone)]
pub struct ArmCompiler {
    pub program: String,
    pub args: Vec<String>,
}

impl ArmCompiler {
    pub fn describe(&self) -> String {
        std::iter::once(self.program.clone()).chain(self.args.iter().cloned()).collect::<Vec<_>>().join(" ")
    }

    pub fn compile(&self, src: &Path, flag: &str, out: &Path) -> Result<(), String> {
        let res = Command::new(&self.program)
            .args(&self.args)
            .args([flag, "-w", "-c"])
            .arg(src)
            .arg("-o")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if res.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&res.stderr).into_owned())
        }
    }
}

pub fn find_arm_compiler() -> Option<ArmCompiler> {
    let mut candidates = Vec::new();
    if let Ok(cc) = std::env::var("BINEYE_CC") {
        let mut words = cc.split_whitespace().map(String::from);
        if let Some(program) = words.next() {
            candidates.push(ArmCompiler {
                program,
                args: words.collect(),
            });
        }
    }
    candidates.push(ArmCompiler {
        program: "clang".into(),
        args: vec!["--target=armv7a-linux-gnueabi".into(), "-marm".into()],
    });
    candidates.push(ArmCompiler {
        program: "arm-linux-gnueabi-gcc".into(),
        args: vec!["-marm".into()],
    });
    let dir = tempfile::tempdir().ok()?;
    let src = dir.path().join("probe.c");
    std::fs::write(&src, "int probe(int x) { return x * 3; }\n").ok()?;
    let obj = dir.path().join("probe.o");
    candidates.into_iter().find(|c| {
        c.compile(&src, "-O1", &obj).is_ok()
            && bineye::elf::load_code_image(&obj, false).is_ok()
    })
}

/// Writes `units` generated C files and compiles each at every level. Returns the undeduplicated
/// manifest and the number of compile failures.
pub fn build_c_corpus(cc: &ArmCompiler, dir: &Path, units: usize, seed: u64) -> (CorpusManifest, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = CorpusManifest::new();
    manifest.provenance.compiler = Some(cc.describe());
    let mut items: Vec<(PathBuf, String)> = Vec::new();
    let mut failures = 0;
    for u in 0..units {
        let src = dir.join(format!("unit{u:03}.c"));
        std::fs::write(&src, cgen::translation_unit(&mut rng, u)).expect("write source");
        for (flag, _) in LEVEL_FLAGS {
            let obj = dir.join(format!("unit{u:03}{}.o", flag.replace('-', "_")));
            match cc.compile(&src, flag, &obj) {
                Ok(()) => items.push((obj, flag.to_string())),
                Err(_) => failures += 1,
            }
        }
    }
    let rep = manifest.add_samples(&items, false);
    (manifest, failures + rep.failed.len())
}

/// Instruction words stamped into each class of the separable synthetic corpus.
pub const STAMPS: [u32; 4] = [0xE92D4800, 0xE3530000, 0x0A000005, 0xE51B3038];

/// ARM relocatable object whose `.text` holds `words` copies of `stamp` interleaved with
/// random filler instructions, so every file differs.
pub fn stamped_object(stamp: u32, words: usize, rng: &mut impl Rng) -> Vec<u8> {
    let code: Vec<u32> = (0..words)
        .map(|i| if i % 3 == 0 { stamp } else { 0xE1A0_0000 | rng.gen_range(0..16) << 12 })
        .collect();
    ObjectBuilder::new().text_words(&code).build()
}
