//! Prompt rendering and response parsing for the two oracle roles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;

use super::{CompositeSpec, EvalFeedback, GenFeedback, SupervisionError};

const LANDMARK_EVAL_TEMPLATE: &str = include_str!("templates/landmark_eval.txt");
const CLASS_LABEL_GEN_TEMPLATE: &str = include_str!("templates/class_label_gen.txt");

fn tag_lines(spec: &CompositeSpec) -> String {
    let mut out = String::new();
    for o in &spec.overlays {
        let _ = writeln!(out, "Tag {} ({})", o.number, o.label);
    }
    out
}

pub fn render_landmark_eval_prompt(spec: &CompositeSpec) -> String {
    format!("{LANDMARK_EVAL_TEMPLATE}\n{}", tag_lines(spec))
}

pub fn render_class_label_gen_prompt(spec: &CompositeSpec) -> String {
    format!("{CLASS_LABEL_GEN_TEMPLATE}\n{}", tag_lines(spec))
}

static EMPTY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bempty_(?:tags?|labels?)\s*=\s*\[").unwrap());
static INCORRECT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bincorrect_(?:tags?|labels?)\s*=\s*\[").unwrap());
static CORRECTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bcorrected_(?:tags?|labels?)\s*=\s*\[").unwrap());
static DUPLICATED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bduplicated_(?:tags?|labels?)\s*=\s*\[").unwrap());
static PRECISE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bprecise_(?:tags?|labels?)_in_duplicated(?:_(?:tags?|labels?))?\s*=\s*\[").unwrap());
static TAG_N: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\btag_(\d+)\s*=\s*\[").unwrap());
static DESCRIPTIVE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bdescriptive_labels?\s*=\s*\[").unwrap());
static NUMBER_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[\s*(\d+)\s*\]").unwrap());

/// Returns the index one past the `]` matching the `[` at `open`, skipping
/// quoted strings.
fn matching_bracket(text: &str, open: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    debug_assert_eq!(bytes[open], b'[');
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut i = open;
    while i < bytes.len() {
        let c = bytes[i];
        match quote {
            Some(q) => {
                if c == b'\\' {
                    i += 1;
                } else if c == q {
                    quote = None;
                }
            }
            None => match c {
                b'\'' | b'"' => quote = Some(c),
                b'[' => depth += 1,
                b']' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(i + 1);
                    }
                }
                _ => {}
            },
        }
        i += 1;
    }
    None
}

/// Body (without the outer brackets) of the last list named by `re`.
fn last_list<'t>(text: &'t str, re: &Regex, name: &str) -> Result<&'t str, SupervisionError> {
    let m =
        re.find_iter(text).last().ok_or_else(|| SupervisionError::MalformedResponse(format!("missing list {name}")))?;
    let open = m.end() - 1;
    let close = matching_bracket(text, open)
        .ok_or_else(|| SupervisionError::MalformedResponse(format!("unbalanced brackets in {name}")))?;
    Ok(&text[open + 1..close - 1])
}

/// Splits on commas that are outside quotes and nested brackets.
fn split_top_level(body: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    let mut start = 0;
    for (i, c) in body.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '\'' | '"' => quote = Some(c),
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&body[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&body[start..]);
    parts.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn parse_int(tok: &str, name: &str) -> Result<u32, SupervisionError> {
    tok.trim()
        .parse()
        .map_err(|_| SupervisionError::MalformedResponse(format!("{name}: expected a tag number, got {tok:?}")))
}

fn parse_ints(body: &str, name: &str) -> Result<Vec<u32>, SupervisionError> {
    split_top_level(body).into_iter().map(|t| parse_int(t, name)).collect()
}

fn unquote(tok: &str) -> String {
    let t = tok.trim();
    let Some(q) = t.chars().next().filter(|c| *c == '\'' || *c == '"') else {
        return t.to_string();
    };
    let inner = t[1..].strip_suffix(q).unwrap_or(&t[1..]);
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn parse_strings(body: &str) -> Vec<String> {
    split_top_level(body).into_iter().map(unquote).filter(|s| !s.trim().is_empty()).collect()
}

fn parse_groups(body: &str, name: &str) -> Result<Vec<Vec<u32>>, SupervisionError> {
    let items = split_top_level(body);
    if items.iter().all(|t| !t.starts_with('(') && !t.starts_with('[')) {
        let flat: Vec<u32> = items.into_iter().map(|t| parse_int(t, name)).collect::<Result<_, _>>()?;
        return Ok(if flat.is_empty() { Vec::new() } else { vec![flat] });
    }
    let mut groups = Vec::new();
    for item in items {
        let inner = item
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .or_else(|| item.strip_prefix('[').and_then(|s| s.strip_suffix(']')))
            .ok_or_else(|| SupervisionError::MalformedResponse(format!("{name}: bad group {item:?}")))?;
        let g = parse_ints(inner, name)?;
        if !g.is_empty() {
            groups.push(g);
        }
    }
    Ok(groups)
}

/// Extracts the five verdict lists. The last occurrence of each name wins,
/// so narration or an echoed prompt before the answer is harmless.
pub fn parse_landmark_eval(text: &str) -> Result<EvalFeedback, SupervisionError> {
    let empty = parse_ints(last_list(text, &EMPTY, "empty_tags")?, "empty_tags")?;
    let incorrect = parse_ints(last_list(text, &INCORRECT, "incorrect_tags")?, "incorrect_tags")?;
    let corrected = parse_strings(last_list(text, &CORRECTED, "corrected_tags")?);
    let duplicated = parse_groups(last_list(text, &DUPLICATED, "duplicated_tags")?, "duplicated_tags")?;
    let precise = parse_ints(last_list(text, &PRECISE, "precise_tags_in_duplicated")?, "precise_tags_in_duplicated")?;
    let fb = EvalFeedback { empty, incorrect, corrected, duplicated, precise_in_duplicated: precise };
    fb.validate()?;
    Ok(fb)
}

/// Collects `tag_N = [...]` lists, plus `descriptive_label = [...]` lists
/// attributed to the closest preceding `[N]`.
pub fn parse_class_label_gen(text: &str) -> Result<GenFeedback, SupervisionError> {
    let mut labels: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    let mut push = |n: u32, body: &str| {
        for l in parse_strings(body) {
            let entry = labels.entry(n).or_default();
            if !entry.contains(&l) {
                entry.push(l);
            }
        }
    };
    let body_at = |end: usize| -> Result<&str, SupervisionError> {
        let open = end - 1;
        let close = matching_bracket(text, open)
            .ok_or_else(|| SupervisionError::MalformedResponse("unbalanced brackets in tag list".into()))?;
        Ok(&text[open + 1..close - 1])
    };
    for cap in TAG_N.captures_iter(text) {
        let m = cap.get(0).expect("whole match");
        let n = parse_int(&cap[1], "tag_N")?;
        push(n, body_at(m.end())?);
    }
    for m in DESCRIPTIVE.find_iter(text) {
        let Some(n) = NUMBER_REF.captures_iter(&text[..m.start()]).last() else {
            return Err(SupervisionError::MalformedResponse("descriptive_label without a preceding [N]".into()));
        };
        let n = parse_int(&n[1], "descriptive_label")?;
        push(n, body_at(m.end())?);
    }
    Ok(GenFeedback { labels })
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        if c == '\'' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('\'');
    out
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(", ")
}

/// Renders feedback the way a well-behaved evaluator answers the final step.
pub fn render_landmark_eval_response(fb: &EvalFeedback) -> String {
    let ints = |v: &[u32]| join(v, |n| n.to_string());
    format!(
        "empty_tags = [{}]\nincorrect_tags = [{}]\ncorrected_tags = [{}]\nduplicated_tags = [{}]\nprecise_tags_in_duplicated = [{}]\n",
        ints(&fb.empty),
        ints(&fb.incorrect),
        join(&fb.corrected, |s| quote(s)),
        join(&fb.duplicated, |g| format!("({})", ints(g))),
        ints(&fb.precise_in_duplicated),
    )
}

pub fn render_class_label_gen_response(gen: &GenFeedback) -> String {
    let mut out = String::new();
    for (n, labels) in &gen.labels {
        let _ = writeln!(out, "tag_{n} = [{}]", join(labels, |s| quote(s)));
    }
    out
}
