//! Reaction mechanism files.
//!
//! A mechanism file is line oriented UTF-8 text. `#` starts a comment that
//! runs to the end of the line. Directives:
//!
//! ```text
//! @species NAME ...            declare species (repeatable, declaration order is vector order)
//! @ro2 NAME ...                peroxy-radical pool summed by `@RO2` reactions
//! @init NAME=VALUE ...         initial concentrations, unlisted species start at 0
//! @tspan log|linear T0 T1 N    observation grid
//! Rk: [c] SP [+ [c] SP ...] = [c] SP [+ ...] : COEFF [@RO2] [!fixed]
//! ```
//!
//! Reaction labels must be numbered `R1`, `R2`, ... in file order. Species
//! must be declared before a reaction or `@ro2` line references them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

/// Largest stoichiometric multiplier accepted on either side of a reaction.
pub const MAX_STOICH: u32 = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown species `{name}`")]
    UnknownSpecies { line: usize, name: String },
    #[error("line {line}: duplicate species `{name}`")]
    DuplicateSpecies { line: usize, name: String },
    #[error("line {line}: rate coefficient must be positive, got {value}")]
    NonPositiveRate { line: usize, value: f64 },
    #[error("line {line}: reaction is flagged @RO2 but no @ro2 pool is declared")]
    Ro2WithoutPool { line: usize },
    #[error("invalid scheme: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    /// 1-based ordinal.
    pub id: usize,
    /// Species index -> forward (consumed) stoichiometric coefficient.
    pub forward: BTreeMap<usize, u32>,
    /// Species index -> reverse (produced) stoichiometric coefficient.
    pub reverse: BTreeMap<usize, u32>,
    pub rate_coefficient: f64,
    pub ro2_scaled: bool,
    pub frozen: bool,
}

impl Reaction {
    pub fn forward_coeff(&self, species: usize) -> u32 {
        self.forward.get(&species).copied().unwrap_or(0)
    }

    pub fn reverse_coeff(&self, species: usize) -> u32 {
        self.reverse.get(&species).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Log,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    pub kind: GridKind,
    pub t_start: f64,
    pub t_end: f64,
    pub n_points: usize,
}

impl TimeGrid {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_points < 2 {
            return Err(format!(
                "time grid needs at least 2 points, got {}",
                self.n_points
            ));
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite()) || self.t_start >= self.t_end {
            return Err(format!(
                "time grid requires t_start < t_end, got {} and {}",
                self.t_start, self.t_end
            ));
        }
        if self.kind == GridKind::Log && self.t_start <= 0.0 {
            return Err("log time grid requires t_start > 0".into());
        }
        Ok(())
    }

    /// Sample times. Endpoints are reproduced exactly.
    pub fn times(&self) -> Vec<f64> {
        let n = self.n_points;
        let last = (n - 1) as f64;
        let mut out: Vec<f64> = match self.kind {
            GridKind::Linear => (0..n)
                .map(|i| self.t_start + (self.t_end - self.t_start) * i as f64 / last)
                .collect(),
            GridKind::Log => {
                let (a, b) = (self.t_start.log10(), self.t_end.log10());
                (0..n)
                    .map(|i| 10f64.powf(a + (b - a) * i as f64 / last))
                    .collect()
            }
        };
        out[0] = self.t_start;
        out[n - 1] = self.t_end;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionScheme {
    pub species: Vec<Species>,
    pub reactions: Vec<Reaction>,
    /// Sorted, deduplicated species indices.
    pub ro2_pool: Vec<usize>,
    pub initial: Vec<f64>,
    pub time_grid: Option<TimeGrid>,
}

impl ReactionScheme {
    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn n_reactions(&self) -> usize {
        self.reactions.len()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn species_names(&self) -> Vec<&str> {
        self.species.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn rate_coefficients(&self) -> Vec<f64> {
        self.reactions.iter().map(|r| r.rate_coefficient).collect()
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.reactions.iter().map(|r| r.frozen).collect()
    }

    pub fn has_ro2(&self) -> bool {
        !self.ro2_pool.is_empty()
    }

    /// Net stoichiometric matrix: entry (species, reaction) = s_r - s_f.
    pub fn net_stoichiometry(&self) -> DMatrix<i32> {
        let mut s = DMatrix::<i32>::zeros(self.n_species(), self.n_reactions());
        for (i, r) in self.reactions.iter().enumerate() {
            for (&j, &c) in &r.forward {
                s[(j, i)] -= c as i32;
            }
            for (&j, &c) in &r.reverse {
                s[(j, i)] += c as i32;
            }
        }
        s
    }

    pub fn net_stoichiometry_f64(&self) -> DMatrix<f64> {
        self.net_stoichiometry().map(|v| v as f64)
    }

    /// Checks every structural invariant. `parse_scheme` calls this; schemes
    /// built by hand should too.
    pub fn validate(&self) -> Result<(), SchemeError> {
        let n = self.n_species();
        let invalid = |m: String| Err(SchemeError::Invalid(m));
        for (i, s) in self.species.iter().enumerate() {
            if s.index != i {
                return invalid(format!(
                    "species `{}` has index {} at position {i}",
                    s.name, s.index
                ));
            }
            if self.species[..i].iter().any(|o| o.name == s.name) {
                return invalid(format!("duplicate species `{}`", s.name));
            }
        }
        if self.initial.len() != n {
            return invalid(format!(
                "expected {n} initial concentrations, got {}",
                self.initial.len()
            ));
        }
        if let Some(v) = self.initial.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return invalid(format!(
                "initial concentrations must be finite and >= 0, got {v}"
            ));
        }
        if self.ro2_pool.iter().any(|&p| p >= n) {
            return invalid("ro2 pool references an unknown species".into());
        }
        for (pos, r) in self.reactions.iter().enumerate() {
            if r.id != pos + 1 {
                return invalid(format!("reaction at position {} has id {}", pos + 1, r.id));
            }
            if !r.forward.values().any(|&c| c >= 1) {
                return invalid(format!("reaction {} has no reactants", r.id));
            }
            if r.forward.keys().chain(r.reverse.keys()).any(|&j| j >= n) {
                return invalid(format!("reaction {} references an unknown species", r.id));
            }
            if !(r.rate_coefficient.is_finite() && r.rate_coefficient > 0.0) {
                return invalid(format!(
                    "reaction {} has nonpositive rate coefficient",
                    r.id
                ));
            }
            if r.ro2_scaled && self.ro2_pool.is_empty() {
                return invalid(format!("reaction {} is @RO2 but the pool is empty", r.id));
            }
        }
        if let Some(g) = &self.time_grid {
            g.validate().map_err(SchemeError::Invalid)?;
        }
        Ok(())
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> SchemeError {
    SchemeError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_number(line: usize, tok: &str) -> Result<f64, SchemeError> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| syntax(line, format!("expected a number, found `{tok}`")))
}

struct Parser {
    species: Vec<Species>,
    reactions: Vec<Reaction>,
    ro2_pool: Vec<usize>,
    initial: BTreeMap<usize, f64>,
    time_grid: Option<TimeGrid>,
}

impl Parser {
    fn lookup(&self, line: usize, name: &str) -> Result<usize, SchemeError> {
        self.species
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| SchemeError::UnknownSpecies {
                line,
                name: name.to_string(),
            })
    }

    fn directive(&mut self, line: usize, text: &str) -> Result<(), SchemeError> {
        let mut toks = text.split_whitespace();
        let head = toks.next().unwrap_or("");
        let rest: Vec<&str> = toks.collect();
        match head {
            "@species" => {
                if rest.is_empty() {
                    return Err(syntax(line, "@species needs at least one name"));
                }
                for name in rest {
                    if !is_identifier(name) {
                        return Err(syntax(line, format!("invalid species name `{name}`")));
                    }
                    if self.species.iter().any(|s| s.name == name) {
                        return Err(SchemeError::DuplicateSpecies {
                            line,
                            name: name.into(),
                        });
                    }
                    let index = self.species.len();
                    self.species.push(Species {
                        name: name.into(),
                        index,
                    });
                }
            }
            "@ro2" => {
                if rest.is_empty() {
                    return Err(syntax(line, "@ro2 needs at least one name"));
                }
                for name in rest {
                    let j = self.lookup(line, name)?;
                    if !self.ro2_pool.contains(&j) {
                        self.ro2_pool.push(j);
                    }
                }
            }
            "@init" => {
                for item in rest {
                    let (name, value) = item.split_once('=').ok_or_else(|| {
                        syntax(line, format!("expected NAME=VALUE, found `{item}`"))
                    })?;
                    let j = self.lookup(line, name)?;
                    let v = parse_number(line, value)?;
                    if v < 0.0 {
                        return Err(syntax(
                            line,
                            format!("negative initial concentration for `{name}`"),
                        ));
                    }
                    self.initial.insert(j, v);
                }
            }
            "@tspan" => {
                if rest.len() != 4 {
                    return Err(syntax(line, "@tspan expects: log|linear T0 T1 N"));
                }
                let kind = match rest[0] {
                    "log" => GridKind::Log,
                    "linear" => GridKind::Linear,
                    other => return Err(syntax(line, format!("unknown grid kind `{other}`"))),
                };
                let grid = TimeGrid {
                    kind,
                    t_start: parse_number(line, rest[1])?,
                    t_end: parse_number(line, rest[2])?,
                    n_points: rest[3]
                        .parse()
                        .map_err(|_| syntax(line, format!("invalid point count `{}`", rest[3])))?,
                };
                grid.validate().map_err(|m| syntax(line, m))?;
                self.time_grid = Some(grid);
            }
            other => return Err(syntax(line, format!("unknown directive `{other}`"))),
        }
        Ok(())
    }

    fn side(&self, line: usize, text: &str) -> Result<BTreeMap<usize, u32>, SchemeError> {
        let mut out = BTreeMap::new();
        for term in text.split('+') {
            let toks: Vec<&str> = term.split_whitespace().collect();
            let (coeff, name) = match toks.as_slice() {
                [name] => (1, *name),
                [c, name] => {
                    let c: u32 = c
                        .parse()
                        .map_err(|_| syntax(line, format!("invalid multiplier `{c}`")))?;
                    (c, *name)
                }
                [] => return Err(syntax(line, "empty term in reaction")),
                _ => return Err(syntax(line, format!("cannot parse term `{}`", term.trim()))),
            };
            if coeff == 0 {
                return Err(syntax(line, "stoichiometric multiplier must be at least 1"));
            }
            let j = self.lookup(line, name)?;
            let total = out.entry(j).or_insert(0);
            *total += coeff;
            if *total > MAX_STOICH {
                return Err(syntax(
                    line,
                    format!("stoichiometric coefficient of `{name}` exceeds {MAX_STOICH}"),
                ));
            }
        }
        Ok(out)
    }

    fn reaction(&mut self, line: usize, text: &str) -> Result<(), SchemeError> {
        let (label, body) = text
            .split_once(':')
            .ok_or_else(|| syntax(line, "reaction line needs `Rk:` label"))?;
        let label = label.trim();
        let id: usize = label
            .strip_prefix('R')
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| syntax(line, format!("invalid reaction label `{label}`")))?;
        let expected = self.reactions.len() + 1;
        if id != expected {
            return Err(syntax(
                line,
                format!("expected label R{expected}, found `{label}`"),
            ));
        }
        let (equation, tail) = body
            .split_once(':')
            .ok_or_else(|| syntax(line, "missing `: COEFF` after the equation"))?;
        let (lhs, rhs) = equation
            .split_once('=')
            .ok_or_else(|| syntax(line, "missing `=` in reaction"))?;
        if rhs.contains('=') {
            return Err(syntax(line, "more than one `=` in reaction"));
        }
        let forward = self.side(line, lhs)?;
        let reverse = self.side(line, rhs)?;

        let mut toks = tail.split_whitespace();
        let coeff_tok = toks
            .next()
            .ok_or_else(|| syntax(line, "missing rate coefficient"))?;
        let k = parse_number(line, coeff_tok)?;
        if k <= 0.0 {
            return Err(SchemeError::NonPositiveRate { line, value: k });
        }
        let (mut ro2_scaled, mut frozen) = (false, false);
        for flag in toks {
            match flag {
                "@RO2" if !ro2_scaled => ro2_scaled = true,
                "!fixed" if !frozen => frozen = true,
                other => return Err(syntax(line, format!("unexpected token `{other}`"))),
            }
        }
        if ro2_scaled && self.ro2_pool.is_empty() {
            return Err(SchemeError::Ro2WithoutPool { line });
        }
        self.reactions.push(Reaction {
            id,
            forward,
            reverse,
            rate_coefficient: k,
            ro2_scaled,
            frozen,
        });
        Ok(())
    }
}

/// Parses and validates a mechanism file.
pub fn parse_scheme(text: &str) -> Result<ReactionScheme, SchemeError> {
    let mut p = Parser {
        species: Vec::new(),
        reactions: Vec::new(),
        ro2_pool: Vec::new(),
        initial: BTreeMap::new(),
        time_grid: None,
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('@') {
            p.directive(line, content)?;
        } else {
            p.reaction(line, content)?;
        }
    }
    if p.species.is_empty() {
        return Err(SchemeError::Invalid("no species declared".into()));
    }
    let mut initial = vec![0.0; p.species.len()];
    for (j, v) in p.initial {
        initial[j] = v;
    }
    p.ro2_pool.sort_unstable();
    let scheme = ReactionScheme {
        species: p.species,
        reactions: p.reactions,
        ro2_pool: p.ro2_pool,
        initial,
        time_grid: p.time_grid,
    };
    scheme.validate()?;
    Ok(scheme)
}

fn write_side(out: &mut String, scheme: &ReactionScheme, side: &BTreeMap<usize, u32>) {
    let terms: Vec<String> = side
        .iter()
        .map(|(&j, &c)| {
            let name = &scheme.species[j].name;
            if c == 1 {
                name.clone()
            } else {
                format!("{c} {name}")
            }
        })
        .collect();
    out.push_str(&terms.join(" + "));
}

/// Canonical text form. Numbers use the shortest representation that parses
/// back to the same `f64`.
pub fn serialize_scheme(scheme: &ReactionScheme) -> String {
    let mut out = String::new();
    for chunk in scheme.species.chunks(8) {
        let names: Vec<&str> = chunk.iter().map(|s| s.name.as_str()).collect();
        let _ = writeln!(out, "@species {}", names.join(" "));
    }
    if !scheme.ro2_pool.is_empty() {
        let names: Vec<&str> = scheme
            .ro2_pool
            .iter()
            .map(|&j| scheme.species[j].name.as_str())
            .collect();
        let _ = writeln!(out, "@ro2 {}", names.join(" "));
    }
    let inits: Vec<String> = scheme
        .initial
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, v)| format!("{}={v:e}", scheme.species[j].name))
        .collect();
    if !inits.is_empty() {
        let _ = writeln!(out, "@init {}", inits.join(" "));
    }
    if let Some(g) = &scheme.time_grid {
        let kind = match g.kind {
            GridKind::Log => "log",
            GridKind::Linear => "linear",
        };
        let _ = writeln!(
            out,
            "@tspan {kind} {:e} {:e} {}",
            g.t_start, g.t_end, g.n_points
        );
    }
    for r in &scheme.reactions {
        let _ = write!(out, "R{}: ", r.id);
        write_side(&mut out, scheme, &r.forward);
        out.push_str(" = ");
        write_side(&mut out, scheme, &r.reverse);
        let _ = write!(out, " : {:e}", r.rate_coefficient);
        if r.ro2_scaled {
            out.push_str(" @RO2");
        }
        if r.frozen {
            out.push_str(" !fixed");
        }
        out.push('\n');
    }
    out
}

const ROBERTSON: &str = include_str!("../mechanisms/robertson.mech");
const POLLU: &str = include_str!("../mechanisms/pollu.mech");
const AOXID: &str = include_str!("../mechanisms/aoxid.mech");
const POLLU_PREDICTED: &str = include_str!("../mechanisms/pollu_predicted.csv");
const AOXID_PREDICTED: &str = include_str!("../mechanisms/aoxid_predicted.csv");

/// Mechanism files shipped with the crate, looked up by file name.
pub fn bundled_text(name: &str) -> Option<&'static str> {
    match name.trim_end_matches(".mech") {
        "robertson" => Some(ROBERTSON),
        "pollu" => Some(POLLU),
        "aoxid" => Some(AOXID),
        _ => None,
    }
}

pub fn bundled(name: &str) -> Option<ReactionScheme> {
    bundled_text(name).map(|t| parse_scheme(t).expect("bundled mechanism parses"))
}

/// Published coefficient estimates for the bundled schemes as `id,k` CSV
/// text. Reactions held fixed during training have no row.
pub fn bundled_estimates(name: &str) -> Option<&'static str> {
    match name.trim_end_matches(".mech") {
        "pollu" => Some(POLLU_PREDICTED),
        "aoxid" => Some(AOXID_PREDICTED),
        _ => None,
    }
}
