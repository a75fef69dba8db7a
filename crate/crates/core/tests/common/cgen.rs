//! Seeded generator of small, well-formed C translation units: integer arithmetic, loops over
//! arrays, branches, switches and calls between functions of the same unit.

use rand::seq::SliceRandom;
use rand::Rng;

const LOCALS: [&str; 4] = ["x", "y", "z", "w"];
const BINOPS: [&str; 8] = ["+", "-", "*", "^", "&", "|", "+", "-"];
const CMPS: [&str; 6] = ["==", "!=", "<", ">", "<=", ">="];

struct Gen<'a, R: Rng> {
    rng: &'a mut R,
    /// Functions defined so far; callable from later ones.
    callees: Vec<String>,
    loop_depth: usize,
}

impl<R: Rng> Gen<'_, R> {
    fn var(&mut self) -> String {
        let pool = ["a", "b", "n", "x", "y", "z", "w", "x", "y"];
        pool.choose(self.rng).unwrap().to_string()
    }

    fn constant(&mut self) -> String {
        match self.rng.gen_range(0..4) {
            0 => self.rng.gen_range(0..8).to_string(),
            1 => self.rng.gen_range(8..256).to_string(),
            2 => format!("0x{:x}", self.rng.gen_range(0x100..0x10000)),
            _ => self.rng.gen_range(1..32).to_string(),
        }
    }

    fn expr(&mut self, depth: usize) -> String {
        let choice = if depth == 0 { self.rng.gen_range(0..3) } else { self.rng.gen_range(0..9) };
        match choice {
            0 | 1 => self.var(),
            2 => self.constant(),
            3 | 4 => {
                let op = BINOPS.choose(self.rng).unwrap();
                format!("({} {op} {})", self.expr(depth - 1), self.expr(depth - 1))
            }
            5 => format!("({} << {})", self.expr(depth - 1), self.rng.gen_range(1..6)),
            6 => format!("({} >> {})", self.expr(depth - 1), self.rng.gen_range(1..6)),
            7 => format!("p[({}) & 15]", self.expr(depth - 1)),
            _ => {
                if let Some(f) = self.callees.choose(self.rng).cloned() {
                    format!("{f}({}, {}, p, n)", self.expr(depth - 1), self.expr(depth - 1))
                } else {
                    format!("g[({}) & 63]", self.expr(depth - 1))
                }
            }
        }
    }

    fn cond(&mut self) -> String {
        let c = CMPS.choose(self.rng).unwrap();
        let lhs = self.expr(1);
        let rhs = if self.rng.gen_bool(0.5) { "0".to_string() } else { self.expr(1) };
        format!("{lhs} {c} {rhs}")
    }

    fn block(&mut self, depth: usize, ind: usize) -> String {
        let count = self.rng.gen_range(1..=if depth == 0 { 2 } else { 4 });
        (0..count).map(|_| self.stmt(depth, ind)).collect()
    }

    fn stmt(&mut self, depth: usize, ind: usize) -> String {
        let pad = "    ".repeat(ind);
        let pick = if depth == 0 { 0 } else { self.rng.gen_range(0..10) };
        match pick {
            0..=2 => {
                let v = LOCALS.choose(self.rng).unwrap();
                let op = ["=", "+=", "^=", "-="].choose(self.rng).unwrap();
                format!("{pad}{v} {op} {};\n", self.expr(2))
            }
            3 => format!("{pad}p[({}) & 15] = {};\n", self.expr(1), self.expr(2)),
            4 => format!("{pad}g[({}) & 63] += {};\n", self.expr(1), self.expr(1)),
            5 | 6 if self.loop_depth < 2 => {
                let i = ["i", "j"][self.loop_depth];
                self.loop_depth += 1;
                let body = self.block(depth - 1, ind + 1);
                self.loop_depth -= 1;
                let acc = LOCALS.choose(self.rng).unwrap();
                format!(
                    "{pad}for (int {i} = 0; {i} < n; {i}++) {{\n{pad}    {acc} += p[{i} & 15] * {};\n{body}{pad}}}\n",
                    self.rng.gen_range(2..9)
                )
            }
            7 => {
                let c = self.cond();
                let then = self.block(depth - 1, ind + 1);
                if self.rng.gen_bool(0.5) {
                    let other = self.block(depth - 1, ind + 1);
                    format!("{pad}if ({c}) {{\n{then}{pad}}} else {{\n{other}{pad}}}\n")
                } else {
                    format!("{pad}if ({c}) {{\n{then}{pad}}}\n")
                }
            }
            8 => {
                let mut s = format!("{pad}switch (({}) & 3) {{\n", self.expr(1));
                for k in 0..self.rng.gen_range(2..5) {
                    s.push_str(&format!("{pad}case {k}:\n"));
                    s.push_str(&self.block(depth - 1, ind + 1));
                    s.push_str(&format!("{pad}    break;\n"));
                }
                s.push_str(&format!("{pad}default:\n{pad}    {} = {};\n{pad}}}\n", LOCALS.choose(self.rng).unwrap(), self.expr(1)));
                s
            }
            _ => {
                let v = LOCALS.choose(self.rng).unwrap();
                format!(
                    "{pad}while ({v} > {} && n-- > 0) {{\n{pad}    {v} = ({v} >> 1) - {};\n{pad}}}\n",
                    self.rng.gen_range(0..64),
                    self.rng.gen_range(1..4)
                )
            }
        }
    }

    fn function(&mut self, name: &str) -> String {
        let is_static = self.rng.gen_bool(0.3) && !self.callees.is_empty();
        let mut s = format!(
            "{}int {name}(int a, int b, int *p, int n) {{\n    int x = a, y = b, z = {}, w = n;\n",
            if is_static { "static " } else { "" },
            self.constant()
        );
        for _ in 0..self.rng.gen_range(3..7) {
            s.push_str(&self.stmt(3, 1));
        }
        s.push_str(&format!("    return {};\n}}\n\n", self.expr(2)));
        self.callees.push(name.to_string());
        s
    }
}

/// A complete translation unit. `unit` only seasons the identifiers.
pub fn translation_unit<R: Rng>(rng: &mut R, unit: usize) -> String {
    let mut gen = Gen {
        rng,
        callees: Vec::new(),
        loop_depth: 0,
    };
    let mut src = String::from("int g[64];\n\n");
    let functions = gen.rng.gen_range(6..11);
    for f in 0..functions {
        src.push_str(&gen.function(&format!("u{unit}_f{f}")));
    }
    // An exported entry point keeps static helpers reachable.
    src.push_str(&format!("int u{unit}_main(int *p, int n) {{\n    int acc = 0;\n"));
    for f in gen.callees.clone() {
        src.push_str(&format!("    acc += {f}(acc, n, p, n);\n"));
    }
    src.push_str("    return acc;\n}\n");
    src
}
