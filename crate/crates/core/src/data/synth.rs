//! Synthetic handwritten-style formulas.
//!
//! Grammar: `expr := term (op term)*`, `term := atom{1,3} script?`,
//! `script := ("^" | "_") "{" atom "}"` attached to the last atom. Atoms are
//! digits and letters, operators `+ - =`. Each atom is drawn from a stroke
//! template with per-glyph jitter; scripts are drawn smaller and shifted.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::inkml::Point;
use super::render::draw_polyline;
use super::{Image, Sample, Vocabulary};
use crate::error::{io_err, Error, Result};
use crate::seed;

const OPERATORS: [&str; 3] = ["+", "-", "="];
const STRUCTURAL: [&str; 4] = ["^", "_", "{", "}"];

/// Generator settings. Text form is `key = value` lines; `tokens` is a
/// space-separated list.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub tokens: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    pub height: usize,
    pub script_prob: f64,
    pub thickness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tokens: "0 1 2 3 4 5 6 7 8 9 x y a b n + - = ^ _ { }".split(' ').map(String::from).collect(),
            min_len: 3,
            max_len: 7,
            height: 32,
            script_prob: 0.25,
            thickness: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                message: format!("line {}: expected key = value", n + 1),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |m: &str| Error::Config { key: k.to_string(), message: m.to_string() };
            match k {
                "tokens" => cfg.tokens = v.split_whitespace().map(String::from).collect(),
                "min_len" => cfg.min_len = v.parse().map_err(|_| bad("expected an integer"))?,
                "max_len" => cfg.max_len = v.parse().map_err(|_| bad("expected an integer"))?,
                "height" => cfg.height = v.parse().map_err(|_| bad("expected an integer"))?,
                "script_prob" => cfg.script_prob = v.parse().map_err(|_| bad("expected a number"))?,
                "thickness" => cfg.thickness = v.parse().map_err(|_| bad("expected a number"))?,
                _ => return Err(bad("unknown grammar key")),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    fn atoms(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(|t| !OPERATORS.contains(t) && !STRUCTURAL.contains(t))
            .collect()
    }

    fn operators(&self) -> Vec<&str> {
        self.tokens.iter().map(String::as_str).filter(|t| OPERATORS.contains(t)).collect()
    }

    fn script_marks(&self) -> Vec<&str> {
        let has = |t: &str| self.tokens.iter().any(|x| x == t);
        if !(has("{") && has("}")) || self.script_prob <= 0.0 {
            return Vec::new();
        }
        ["^", "_"].into_iter().filter(|m| has(m)).collect()
    }

    /// Checks the configuration against a vocabulary and the glyph set.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let bad = |key: &str, m: String| Err(Error::Config { key: key.to_string(), message: m });
        for t in &self.tokens {
            if vocab.id(t).is_none() {
                return bad("tokens", format!("token {t:?} is not in the vocabulary"));
            }
            if !STRUCTURAL.contains(&t.as_str()) && glyph(t).is_none() {
                return bad("tokens", format!("no glyph template for {t:?}"));
            }
        }
        if self.atoms().is_empty() {
            return bad("tokens", "at least one atom (digit or letter) is required".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("min_len", format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if self.height < 16 {
            return bad("height", "must be at least 16".into());
        }
        if !(0.0..=1.0).contains(&self.script_prob) {
            return bad("script_prob", "must lie in [0, 1]".into());
        }
        if !(self.min_len..=self.max_len).any(|l| self.feasible(l)) {
            return bad("max_len", "no expression length in range is producible".into());
        }
        Ok(())
    }

    fn term_lengths(&self) -> Vec<usize> {
        let mut v = vec![1, 2, 3];
        if !self.script_marks().is_empty() {
            v.extend([5, 6, 7]);
        }
        v
    }

    fn feasible(&self, len: usize) -> bool {
        let terms = self.term_lengths();
        let chain = !self.operators().is_empty();
        let mut ok = vec![false; len + 1];
        for l in 1..=len {
            ok[l] = terms.contains(&l) || (chain && terms.iter().any(|&t| l > t + 1 && ok[l - t - 1]));
        }
        ok[len]
    }
}

/// Stroke template in a unit-height box; `y` grows downward.
struct Glyph {
    strokes: &'static [&'static [(f64, f64)]],
}

fn glyph(token: &str) -> Option<Glyph> {
    let strokes: &'static [&'static [(f64, f64)]] = match token {
        "0" => &[&[
            (0.4, 0.0), (0.62, 0.1), (0.72, 0.35), (0.72, 0.65), (0.62, 0.9), (0.4, 1.0),
            (0.18, 0.9), (0.08, 0.65), (0.08, 0.35), (0.18, 0.1), (0.4, 0.0),
        ]],
        "1" => &[&[(0.15, 0.2), (0.35, 0.0), (0.35, 1.0)]],
        "2" => &[&[(0.1, 0.25), (0.3, 0.02), (0.6, 0.02), (0.72, 0.25), (0.6, 0.5), (0.1, 1.0), (0.8, 1.0)]],
        "3" => &[&[
            (0.1, 0.1), (0.4, 0.0), (0.7, 0.15), (0.6, 0.4), (0.35, 0.5), (0.65, 0.6), (0.75, 0.85),
            (0.45, 1.0), (0.1, 0.9),
        ]],
        "4" => &[&[(0.6, 1.0), (0.6, 0.0), (0.05, 0.7), (0.8, 0.7)]],
        "5" => &[&[(0.75, 0.0), (0.15, 0.0), (0.1, 0.45), (0.5, 0.4), (0.75, 0.65), (0.6, 0.95), (0.3, 1.0), (0.1, 0.9)]],
        "6" => &[&[
            (0.65, 0.05), (0.35, 0.1), (0.15, 0.45), (0.15, 0.8), (0.4, 1.0), (0.65, 0.85), (0.65, 0.6),
            (0.4, 0.5), (0.15, 0.65),
        ]],
        "7" => &[&[(0.1, 0.0), (0.8, 0.0), (0.35, 1.0)]],
        "8" => &[&[
            (0.4, 0.5), (0.15, 0.3), (0.4, 0.0), (0.65, 0.25), (0.4, 0.5), (0.1, 0.75), (0.4, 1.0),
            (0.7, 0.75), (0.4, 0.5),
        ]],
        "9" => &[&[(0.65, 0.4), (0.4, 0.5), (0.15, 0.3), (0.35, 0.0), (0.65, 0.15), (0.65, 0.5), (0.5, 1.0), (0.2, 0.95)]],
        "x" => &[&[(0.1, 0.35), (0.7, 1.0)], &[(0.7, 0.35), (0.1, 1.0)]],
        "y" => &[&[(0.1, 0.35), (0.4, 0.72)], &[(0.7, 0.35), (0.2, 1.0)]],
        "a" => &[&[(0.65, 0.45), (0.4, 0.35), (0.15, 0.55), (0.2, 0.9), (0.45, 1.0), (0.65, 0.8)], &[(0.65, 0.35), (0.7, 1.0)]],
        "b" => &[&[(0.15, 0.0), (0.15, 1.0)], &[(0.15, 0.6), (0.4, 0.4), (0.65, 0.6), (0.6, 0.9), (0.35, 1.0), (0.15, 0.9)]],
        "n" => &[&[(0.15, 0.35), (0.15, 1.0)], &[(0.15, 0.55), (0.4, 0.35), (0.65, 0.5), (0.65, 1.0)]],
        "+" => &[&[(0.1, 0.5), (0.7, 0.5)], &[(0.4, 0.2), (0.4, 0.8)]],
        "-" => &[&[(0.1, 0.5), (0.7, 0.5)]],
        "=" => &[&[(0.1, 0.38), (0.7, 0.38)], &[(0.1, 0.62), (0.7, 0.62)]],
        _ => return None,
    };
    Some(Glyph { strokes })
}

impl Glyph {
    fn advance(&self) -> f64 {
        self.strokes.iter().flat_map(|s| s.iter()).map(|p| p.0).fold(0.0, f64::max) + 0.25
    }
}

/// Token sequence (without eos) following the grammar, with exactly `len` tokens.
fn generate_tokens<'a>(cfg: &'a SynthConfig, len: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let atoms = cfg.atoms();
    let ops = cfg.operators();
    let marks = cfg.script_marks();
    let terms = cfg.term_lengths();
    let mut out = Vec::with_capacity(len);
    let mut remaining = len;
    loop {
        // A term either finishes the expression or leaves room for `op term`.
        let choices: Vec<usize> = terms
            .iter()
            .copied()
            .filter(|&t| t == remaining || (!ops.is_empty() && remaining > t + 1 && cfg.feasible(remaining - t - 1)))
            .collect();
        let with_script: Vec<usize> = choices.iter().copied().filter(|&t| t >= 5).collect();
        let plain: Vec<usize> = choices.iter().copied().filter(|&t| t < 5).collect();
        let t = if !with_script.is_empty() && (plain.is_empty() || rng.gen_bool(cfg.script_prob)) {
            with_script[rng.gen_range(0..with_script.len())]
        } else {
            plain[rng.gen_range(0..plain.len())]
        };
        let n_atoms = if t >= 5 { t - 4 } else { t };
        for _ in 0..n_atoms {
            out.push(atoms[rng.gen_range(0..atoms.len())]);
        }
        if t >= 5 {
            out.push(marks[rng.gen_range(0..marks.len())]);
            out.push("{");
            out.push(atoms[rng.gen_range(0..atoms.len())]);
            out.push("}");
        }
        remaining -= t;
        if remaining == 0 {
            return out;
        }
        out.push(ops[rng.gen_range(0..ops.len())]);
        remaining -= 1;
    }
}

#[derive(Clone, Copy)]
enum Level {
    Base,
    Super,
    Sub,
}

fn draw_glyph(img: &mut Image, g: &Glyph, left: f64, top: f64, size: f64, radius: f64, rng: &mut ChaCha8Rng) -> f64 {
    let scale = size * rng.gen_range(0.9..1.1);
    let shear = rng.gen_range(-0.15..0.15);
    let dy = rng.gen_range(-0.05..0.05) * size;
    for stroke in g.strokes {
        let pts: Vec<Point> = stroke
            .iter()
            .map(|&(x, y)| {
                let (jx, jy) = (rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
                Point { x: left + (x + jx + shear * (1.0 - y)) * scale, y: top + dy + (y + jy) * scale }
            })
            .collect();
        draw_polyline(img, &pts, radius);
    }
    g.advance() * scale
}

/// Deterministic synthetic sample for `seed`.
pub fn synth_sample(seed: u64, cfg: &SynthConfig, vocab: &Vocabulary) -> Result<Sample> {
    cfg.validate(vocab)?;
    let mut rng = seed::rng_for(&[seed, 0x5e17]);
    let lengths: Vec<usize> = (cfg.min_len..=cfg.max_len).filter(|&l| cfg.feasible(l)).collect();
    let len = lengths[rng.gen_range(0..lengths.len())];
    let tokens = generate_tokens(cfg, len, &mut rng);

    let h = cfg.height as f64;
    let size = 0.5 * h;
    let base_top = (h - size) / 2.0;
    let margin = super::render::MARGIN as f64;
    let radius = cfg.thickness / 2.0;
    // Upper bound on width; trimmed after layout.
    let cap = (margin * 2.0 + tokens.len() as f64 * size * 1.3).ceil() as usize + 4;
    let mut img = Image::blank(cfg.height, cap);
    let mut x = margin;
    let mut level = Level::Base;
    for tok in &tokens {
        match *tok {
            "^" => level = Level::Super,
            "_" => level = Level::Sub,
            "{" => {}
            "}" => level = Level::Base,
            t => {
                let g = glyph(t).expect("validated glyph");
                let (sz, top) = match level {
                    Level::Base => (size, base_top),
                    Level::Super => (0.6 * size, base_top - 0.25 * size),
                    Level::Sub => (0.6 * size, base_top + 0.65 * size),
                };
                x += draw_glyph(&mut img, &g, x, top, sz, radius, &mut rng) + rng.gen_range(0.0..0.1) * size;
            }
        }
    }
    let width = ((x + margin).ceil() as usize).clamp(super::MIN_SIDE, cap);
    let mut pixels = Vec::with_capacity(cfg.height * width);
    for y in 0..cfg.height {
        pixels.extend_from_slice(&img.pixels()[y * cap..y * cap + width]);
    }
    let mut label = vocab.encode(&tokens.join(" "))?;
    label.push(vocab.eos());
    Sample::labeled(Image::new(cfg.height, width, pixels), label, vocab)
}

/// Recursive-descent membership test for the generator grammar, written
/// independently of the generator.
pub fn grammar_accepts(tokens: &[&str], cfg: &SynthConfig) -> bool {
    let atoms: BTreeSet<&str> = cfg.atoms().into_iter().collect();
    let ops: BTreeSet<&str> = cfg.operators().into_iter().collect();
    let is_atom = |t: Option<&&str>| t.is_some_and(|t| atoms.contains(t));

    fn term(toks: &[&str], mut i: usize, is_atom: &dyn Fn(Option<&&str>) -> bool) -> Option<usize> {
        let start = i;
        while i - start < 3 && is_atom(toks.get(i)) {
            i += 1;
        }
        if i == start {
            return None;
        }
        if matches!(toks.get(i), Some(&"^") | Some(&"_")) {
            if toks.get(i + 1) != Some(&"{") || !is_atom(toks.get(i + 2)) || toks.get(i + 3) != Some(&"}") {
                return None;
            }
            i += 4;
        }
        Some(i)
    }

    let Some(mut i) = term(tokens, 0, &is_atom) else { return false };
    while i < tokens.len() {
        if !ops.contains(tokens[i]) {
            return false;
        }
        match term(tokens, i + 1, &is_atom) {
            Some(j) => i = j,
            None => return false,
        }
    }
    true
}
