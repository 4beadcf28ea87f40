//! Parser, validator and renderer for the management command language.
//!
//! Commands have the shape `<verb> [<object>] [--flag <arg>...]...`. The
//! vocabulary is not hard-coded: verbs and objects come from a class's
//! `base_commands`, flags and their argument patterns from its `flags`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::CommandClass;

/// Kind of a single flag argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgKind {
    /// Eight digits forming a valid `YYYYMMDD` calendar date.
    Date,
    /// The literal keyword `now`.
    Now,
    /// 14 or 15 decimal digits.
    Imsi,
    /// Any token that is not itself a flag.
    Literal,
}

impl ArgKind {
    pub fn accepts(self, raw: &str) -> bool {
        match self {
            ArgKind::Date => is_valid_date(raw),
            ArgKind::Now => raw == "now",
            ArgKind::Imsi => is_valid_imsi(raw),
            ArgKind::Literal => !raw.is_empty() && !raw.starts_with("--"),
        }
    }

    fn placeholder(self) -> &'static str {
        match self {
            ArgKind::Date => "<YYYYMMDD>",
            ArgKind::Now => "now",
            ArgKind::Imsi => "<imsi>",
            ArgKind::Literal => "<value>",
        }
    }
}

impl fmt::Display for ArgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArgKind::Date => "date",
            ArgKind::Now => "now",
            ArgKind::Imsi => "imsi",
            ArgKind::Literal => "literal",
        };
        f.write_str(s)
    }
}

/// Allowed argument shapes of one flag within a class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagSpec {
    pub name: String,
    pub arg_patterns: Vec<Vec<ArgKind>>,
}

impl FlagSpec {
    pub fn new(name: impl Into<String>, arg_patterns: Vec<Vec<ArgKind>>) -> Self {
        Self {
            name: name.into(),
            arg_patterns,
        }
    }

    /// Checks the flag's own invariants: a `--` name, at least one pattern,
    /// and no repeated patterns.
    pub fn check(&self) -> Result<(), String> {
        if !self.name.starts_with("--") || self.name.len() < 3 {
            return Err(format!("flag name {:?} must start with \"--\"", self.name));
        }
        if self.arg_patterns.is_empty() {
            return Err(format!("flag {} has no argument patterns", self.name));
        }
        let mut seen = HashSet::new();
        for p in &self.arg_patterns {
            if !seen.insert(p) {
                return Err(format!("flag {} repeats an argument pattern", self.name));
            }
        }
        Ok(())
    }

    /// Usage strings such as `--active <YYYYMMDD> now`.
    pub fn usages(&self) -> Vec<String> {
        self.arg_patterns
            .iter()
            .map(|p| {
                let mut s = self.name.clone();
                for k in p {
                    s.push(' ');
                    s.push_str(k.placeholder());
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlagArg {
    pub kind: ArgKind,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flag {
    pub name: String,
    pub args: Vec<FlagArg>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommandAst {
    pub verb: String,
    pub object: Option<String>,
    pub flags: Vec<Flag>,
}

impl CommandAst {
    pub fn flag(&self, name: &str) -> Option<&Flag> {
        self.flags.iter().find(|f| f.name == name)
    }
}

impl fmt::Display for CommandAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.verb)?;
        if let Some(obj) = &self.object {
            write!(f, " {obj}")?;
        }
        for flag in &self.flags {
            write!(f, " {}", flag.name)?;
            for arg in &flag.args {
                write!(f, " {}", arg.raw)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyCommand,
    UnknownVerb {
        verb: String,
    },
    UnknownObject {
        verb: String,
        object: String,
    },
    MissingObject {
        verb: String,
    },
    UnexpectedToken {
        token: String,
    },
    UnknownFlag {
        flag: String,
    },
    DuplicateFlag {
        flag: String,
    },
    MissingArguments {
        flag: String,
    },
    WrongArity {
        flag: String,
        expected: Vec<usize>,
        got: usize,
    },
    InvalidDate {
        flag: String,
        raw: String,
    },
    InvalidImsi {
        flag: String,
        raw: String,
    },
    ArgMismatch {
        flag: String,
        raw: String,
        expected: ArgKind,
    },
}

/// One reason a command was rejected, anchored at a whitespace token index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub position: usize,
    #[serde(flatten)]
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    fn new(position: usize, kind: ViolationKind) -> Self {
        let message = describe(&kind);
        Self {
            position,
            kind,
            message,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "token {}: {}", self.position, self.message)
    }
}

impl std::error::Error for Violation {}

fn describe(kind: &ViolationKind) -> String {
    match kind {
        ViolationKind::EmptyCommand => "empty command".to_string(),
        ViolationKind::UnknownVerb { verb } => format!("unknown command verb {verb:?}"),
        ViolationKind::UnknownObject { verb, object } => {
            format!("unknown object {object:?} for {verb:?}")
        }
        ViolationKind::MissingObject { verb } => format!("{verb:?} requires an object"),
        ViolationKind::UnexpectedToken { token } => {
            format!("unexpected token {token:?}, expected a flag")
        }
        ViolationKind::UnknownFlag { flag } => format!("unknown flag {flag}"),
        ViolationKind::DuplicateFlag { flag } => format!("flag {flag} given more than once"),
        ViolationKind::MissingArguments { flag } => format!("flag {flag} requires arguments"),
        ViolationKind::WrongArity {
            flag,
            expected,
            got,
        } => {
            let exp: Vec<String> = expected.iter().map(usize::to_string).collect();
            format!(
                "flag {flag} takes {} argument(s), got {got}",
                exp.join(" or ")
            )
        }
        ViolationKind::InvalidDate { flag, raw } => {
            format!("invalid date {raw:?} for {flag}, expected a calendar date YYYYMMDD")
        }
        ViolationKind::InvalidImsi { flag, raw } => {
            format!("invalid IMSI {raw:?} for {flag}, expected 14 or 15 digits")
        }
        ViolationKind::ArgMismatch {
            flag,
            raw,
            expected,
        } => format!("argument {raw:?} of {flag} is not a valid {expected}"),
    }
}

/// Non-fatal observations about an otherwise valid command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub violations: Vec<Violation>,
    pub warnings: Vec<Warning>,
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

const DASHES: [char; 3] = ['-', '\u{2013}', '\u{2014}'];

/// Rewrites a leading dash run that is `--` or contains an en/em dash to `--`.
fn canonical_token(tok: &str) -> std::borrow::Cow<'_, str> {
    let rest = tok.trim_start_matches(DASHES);
    let run = &tok[..tok.len() - rest.len()];
    if run.is_empty() || run == "--" || run == "-" || rest.is_empty() {
        return tok.into();
    }
    if run.contains(['\u{2013}', '\u{2014}']) || run.chars().all(|c| c == '-') {
        format!("--{rest}").into()
    } else {
        tok.into()
    }
}

/// Splits on whitespace, canonicalising typographic flag dashes to `--`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| canonical_token(t).into_owned())
        .collect()
}

/// Whitespace-collapsed, dash-canonical form of arbitrary text.
pub fn canonicalize(text: &str) -> String {
    tokenize(text).join(" ")
}

pub fn is_leap_year(year: u32) -> bool {
    (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400)
}

/// True for exactly eight ASCII digits naming a real proleptic-Gregorian day.
pub fn is_valid_date(raw: &str) -> bool {
    if raw.len() != 8 || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let year: u32 = raw[0..4].parse().unwrap_or(0);
    let month: u32 = raw[4..6].parse().unwrap_or(0);
    let day: u32 = raw[6..8].parse().unwrap_or(0);
    let days_in_month = match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap_year(year) => 29,
        2 => 28,
        _ => return false,
    };
    (1..=days_in_month).contains(&day)
}

pub fn is_valid_imsi(raw: &str) -> bool {
    matches!(raw.len(), 14 | 15) && raw.bytes().all(|b| b.is_ascii_digit())
}

/// Splits a base-command string into `(verb, object)`.
fn split_base(base: &str) -> Option<(&str, Option<&str>)> {
    let mut it = base.split_whitespace();
    let verb = it.next()?;
    Some((verb, it.next()))
}

/// Verbs that start any of the class's base commands, in catalog order.
pub fn verbs(class: &CommandClass) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for b in &class.base_commands {
        if let Some((v, _)) = split_base(b) {
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    out
}

struct Analysis {
    ast: Option<CommandAst>,
    verdict: Verdict,
}

fn analyze(text: &str, class: &CommandClass) -> Analysis {
    let tokens = tokenize(text);
    let mut violations = Vec::new();
    let mut warnings = Vec::new();

    let Some(verb) = tokens.first() else {
        violations.push(Violation::new(0, ViolationKind::EmptyCommand));
        return Analysis {
            ast: None,
            verdict: Verdict {
                violations,
                warnings,
            },
        };
    };

    let bases: Vec<(&str, Option<&str>)> = class
        .base_commands
        .iter()
        .filter_map(|b| split_base(b))
        .filter(|(v, _)| v == verb)
        .collect();
    if bases.is_empty() {
        violations.push(Violation::new(
            0,
            ViolationKind::UnknownVerb { verb: verb.clone() },
        ));
        return Analysis {
            ast: None,
            verdict: Verdict {
                violations,
                warnings,
            },
        };
    }

    let mut pos = 1;
    let allows_bare = bases.iter().any(|(_, o)| o.is_none());
    let object = match tokens.get(1) {
        Some(tok) if !tok.starts_with("--") => {
            if bases.iter().any(|(_, o)| *o == Some(tok.as_str())) {
                pos = 2;
                Some(tok.clone())
            } else {
                violations.push(Violation::new(
                    1,
                    ViolationKind::UnknownObject {
                        verb: verb.clone(),
                        object: tok.clone(),
                    },
                ));
                pos = 2;
                None
            }
        }
        _ => {
            if !allows_bare {
                violations.push(Violation::new(
                    1,
                    ViolationKind::MissingObject { verb: verb.clone() },
                ));
            }
            None
        }
    };

    let mut flags: Vec<Flag> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    while pos < tokens.len() {
        let tok = &tokens[pos];
        if !tok.starts_with("--") {
            violations.push(Violation::new(
                pos,
                ViolationKind::UnexpectedToken { token: tok.clone() },
            ));
            pos += 1;
            continue;
        }
        let flag_pos = pos;
        let mut end = pos + 1;
        while end < tokens.len() && !tokens[end].starts_with("--") {
            end += 1;
        }
        let args = &tokens[pos + 1..end];
        pos = end;

        if !seen.insert(tok.clone()) {
            violations.push(Violation::new(
                flag_pos,
                ViolationKind::DuplicateFlag { flag: tok.clone() },
            ));
            continue;
        }
        let Some(spec) = class.flags.iter().find(|f| &f.name == tok) else {
            violations.push(Violation::new(
                flag_pos,
                ViolationKind::UnknownFlag { flag: tok.clone() },
            ));
            continue;
        };
        match match_args(spec, args) {
            Ok(parsed) => {
                if let [a, b] = parsed.as_slice() {
                    if a.kind == ArgKind::Date && b.kind == ArgKind::Date && a.raw > b.raw {
                        warnings.push(Warning {
                            position: flag_pos + 1,
                            message: format!(
                                "{} range starts after it ends ({} > {})",
                                spec.name, a.raw, b.raw
                            ),
                        });
                    }
                }
                flags.push(Flag {
                    name: tok.clone(),
                    args: parsed,
                });
            }
            Err((offset, kind)) => violations.push(Violation::new(flag_pos + offset, kind)),
        }
    }

    let ast = violations.is_empty().then(|| CommandAst {
        verb: verb.clone(),
        object,
        flags,
    });
    Analysis {
        ast,
        verdict: Verdict {
            violations,
            warnings,
        },
    }
}

/// Returns typed args from the first pattern that accepts `args`, or the
/// offending argument offset (relative to the flag token) and reason.
fn match_args(spec: &FlagSpec, args: &[String]) -> Result<Vec<FlagArg>, (usize, ViolationKind)> {
    let same_len: Vec<&Vec<ArgKind>> = spec
        .arg_patterns
        .iter()
        .filter(|p| p.len() == args.len())
        .collect();
    for pattern in &same_len {
        if pattern.iter().zip(args).all(|(k, a)| k.accepts(a)) {
            return Ok(pattern
                .iter()
                .zip(args)
                .map(|(k, a)| FlagArg {
                    kind: *k,
                    raw: a.clone(),
                })
                .collect());
        }
    }
    let flag = spec.name.clone();
    let Some(pattern) = same_len.first() else {
        if args.is_empty() {
            return Err((0, ViolationKind::MissingArguments { flag }));
        }
        let mut expected: Vec<usize> = spec.arg_patterns.iter().map(Vec::len).collect();
        expected.sort_unstable();
        expected.dedup();
        return Err((
            0,
            ViolationKind::WrongArity {
                flag,
                expected,
                got: args.len(),
            },
        ));
    };
    // Report against the first pattern of the right length.
    let (i, (kind, raw)) = pattern
        .iter()
        .zip(args)
        .enumerate()
        .find(|(_, (k, a))| !k.accepts(a))
        .expect("a same-length pattern that failed has a rejected arg");
    let raw = raw.clone();
    let looks_numeric = raw.bytes().all(|b| b.is_ascii_digit());
    let reason = match kind {
        ArgKind::Date if looks_numeric || raw.len() == 8 => {
            ViolationKind::InvalidDate { flag, raw }
        }
        ArgKind::Imsi if looks_numeric => ViolationKind::InvalidImsi { flag, raw },
        k => ViolationKind::ArgMismatch {
            flag,
            raw,
            expected: *k,
        },
    };
    Err((i + 1, reason))
}

/// Parses `command_text` under `class`, returning the first violation found.
pub fn parse(command_text: &str, class: &CommandClass) -> Result<CommandAst, Violation> {
    let Analysis { ast, mut verdict } = analyze(command_text, class);
    match ast {
        Some(ast) => Ok(ast),
        None => Err(verdict.violations.remove(0)),
    }
}

/// Canonical single-spaced text of a command.
pub fn render(ast: &CommandAst) -> String {
    ast.to_string()
}

/// Non-throwing check: every violation found, plus warnings.
pub fn validate(command_text: &str, class: &CommandClass) -> Verdict {
    analyze(command_text, class).verdict
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ClassCatalog;

    fn list_class() -> CommandClass {
        ClassCatalog::default_catalog().get("list").unwrap().clone()
    }

    fn user_class() -> CommandClass {
        ClassCatalog::default_catalog().get("user").unwrap().clone()
    }

    #[test]
    fn parses_date_range() {
        let ast = parse("list users --active 20240801 20240901", &list_class()).unwrap();
        assert_eq!(ast.verb, "list");
        assert_eq!(ast.object.as_deref(), Some("users"));
        assert_eq!(ast.flags.len(), 1);
        let f = &ast.flags[0];
        assert_eq!(f.name, "--active");
        assert_eq!(
            f.args,
            vec![
                FlagArg {
                    kind: ArgKind::Date,
                    raw: "20240801".into()
                },
                FlagArg {
                    kind: ArgKind::Date,
                    raw: "20240901".into()
                },
            ]
        );
    }

    #[test]
    fn parses_now_keyword() {
        let ast = parse("list users --active now", &list_class()).unwrap();
        assert_eq!(
            ast.flags[0].args,
            vec![FlagArg {
                kind: ArgKind::Now,
                raw: "now".into()
            }]
        );
    }

    #[test]
    fn rejects_month_13() {
        let err = parse("list users --active 20241301 now", &list_class()).unwrap_err();
        assert!(
            matches!(err.kind, ViolationKind::InvalidDate { .. }),
            "{err:?}"
        );
        assert_eq!(err.position, 3);
    }

    #[test]
    fn render_examples() {
        let c = list_class();
        let ast = parse("list users --active now", &c).unwrap();
        assert_eq!(render(&ast), "list users --active now");
        let ast = parse("list users", &c).unwrap();
        assert_eq!(render(&ast), "list users");
        let ast = parse("list   users  --active 20240301 now", &c).unwrap();
        assert_eq!(render(&ast), "list users --active 20240301 now");
    }

    #[test]
    fn typographic_dashes_canonicalise() {
        let c = list_class();
        for text in [
            "list users \u{2013}active now",
            "list users \u{2014}active now",
            "list users -\u{2013}active now",
        ] {
            assert_eq!(render(&parse(text, &c).unwrap()), "list users --active now");
        }
    }

    #[test]
    fn validate_messages() {
        let c = list_class();
        assert!(validate("list users --active 20240810 now", &c).is_ok());
        let v = validate("", &c);
        assert_eq!(v.violations[0].message, "empty command");
        let v = validate("list users --active", &c);
        assert_eq!(v.violations[0].message, "flag --active requires arguments");
        assert_eq!(v.violations[0].position, 2);
    }

    #[test]
    fn rejects_unknown_object_and_flags() {
        let c = list_class();
        let e = parse("list userz", &c).unwrap_err();
        assert!(matches!(e.kind, ViolationKind::UnknownObject { .. }));
        let e = parse("lst users", &c).unwrap_err();
        assert!(matches!(e.kind, ViolationKind::UnknownVerb { .. }));
        let e = parse("list users --since now", &c).unwrap_err();
        assert!(matches!(e.kind, ViolationKind::UnknownFlag { .. }));
        let e = parse("list users --active now --active now", &c).unwrap_err();
        assert!(matches!(e.kind, ViolationKind::DuplicateFlag { .. }));
        let e = parse("list users --active 20240101 20240102 now", &c).unwrap_err();
        assert!(
            matches!(e.kind, ViolationKind::WrongArity { got: 3, .. }),
            "{e:?}"
        );
        let e = parse("list", &c).unwrap_err();
        assert!(matches!(e.kind, ViolationKind::MissingObject { .. }));
        let e = parse("list users now", &c).unwrap_err();
        assert!(matches!(e.kind, ViolationKind::UnexpectedToken { .. }));
    }

    #[test]
    fn validate_collects_multiple_violations() {
        let v = validate("list users --bogus --active 20230229 now", &list_class());
        assert_eq!(v.violations.len(), 2);
    }

    #[test]
    fn imsi_lengths() {
        let c = user_class();
        assert!(parse("user add --imsi 00101000000001", &c).is_ok());
        assert!(parse("user add --imsi 001010000000001", &c).is_ok());
        let e = parse("user add --imsi 0010100000001", &c).unwrap_err();
        assert!(matches!(e.kind, ViolationKind::InvalidImsi { .. }));
        let e = parse("user add --imsi 00101000000000x", &c).unwrap_err();
        assert!(matches!(e.kind, ViolationKind::ArgMismatch { .. }));
    }

    #[test]
    fn leap_days() {
        assert!(is_valid_date("20240229"));
        assert!(!is_valid_date("20230229"));
        assert!(is_valid_date("20000229"));
        assert!(!is_valid_date("19000229"));
        assert!(!is_valid_date("20240000"));
        assert!(!is_valid_date("2024011"));
        assert!(!is_valid_date("2024-1-1"));
    }

    #[test]
    fn reversed_range_is_a_warning() {
        let v = validate("list users --active 20240901 20240801", &list_class());
        assert!(v.is_ok());
        assert_eq!(v.warnings.len(), 1);
    }

    #[test]
    fn flag_spec_usage() {
        let spec = FlagSpec::new("--active", vec![vec![ArgKind::Date, ArgKind::Now]]);
        assert_eq!(spec.usages(), vec!["--active <YYYYMMDD> now"]);
        assert!(FlagSpec::new("active", vec![vec![]]).check().is_err());
        assert!(FlagSpec::new("--x", vec![]).check().is_err());
        assert!(FlagSpec::new("--x", vec![vec![], vec![]]).check().is_err());
    }
}
