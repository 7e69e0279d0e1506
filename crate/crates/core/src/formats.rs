//! The four structured-data linearizations (knowledge graph, triple set,
//! meaning representation, table) over one canonical triple representation.
//!
//! Grammars, after whitespace normalization:
//!
//! * `Kg`: `[HEAD] s [TYPE] r [TAIL] o` per triple, space separated.
//! * `Tripleset`: `s : r : o` per triple, joined by ` | `.
//! * `Mr`: `name[s]` opens a subject group, followed by `r[o]` items, all
//!   joined by `, `.
//! * `Totto`: page and section titles, then a `<table>` of
//!   `<cell> o <col_header> r </col_header> [<row_header> s </row_header>] </cell>`.
//!   A cell without a row header belongs to the page title (or to the
//!   literal `Entities` when the page title is empty).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const KG_HEAD: &str = "[HEAD]";
pub const KG_TYPE: &str = "[TYPE]";
pub const KG_TAIL: &str = "[TAIL]";

pub const TOTTO_TAGS: [&str; 12] = [
    "<page_title>",
    "</page_title>",
    "<section_title>",
    "</section_title>",
    "<table>",
    "</table>",
    "<cell>",
    "</cell>",
    "<col_header>",
    "</col_header>",
    "<row_header>",
    "</row_header>",
];

/// Subject used for table cells without a row header when the page title is empty.
pub const TOTTO_DEFAULT_SUBJECT: &str = "Entities";

/// Relation key that opens a subject group in the MR grammar.
pub const MR_NAME_KEY: &str = "name";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatId {
    Kg,
    Tripleset,
    Mr,
    Totto,
}

impl FormatId {
    pub const ALL: [FormatId; 4] = [FormatId::Kg, FormatId::Tripleset, FormatId::Mr, FormatId::Totto];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            FormatId::Kg => 0,
            FormatId::Tripleset => 1,
            FormatId::Mr => 2,
            FormatId::Totto => 3,
        }
    }

    pub fn from_index(index: usize) -> Option<FormatId> {
        FormatId::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FormatId::Kg => "kg",
            FormatId::Tripleset => "tripleset",
            FormatId::Mr => "mr",
            FormatId::Totto => "totto",
        }
    }
}

impl fmt::Display for FormatId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kg" => Ok(FormatId::Kg),
            "tripleset" | "triples" => Ok(FormatId::Tripleset),
            "mr" => Ok(FormatId::Mr),
            "totto" | "table" => Ok(FormatId::Totto),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

/// Trim and collapse internal whitespace runs to a single space.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Returns the first control token of any grammar found in `field`.
fn reserved_in(field: &str) -> Option<&'static str> {
    for tok in [KG_HEAD, KG_TYPE, KG_TAIL] {
        if field.contains(tok) {
            return Some(tok);
        }
    }
    for tag in TOTTO_TAGS {
        if field.contains(tag) {
            return Some(tag);
        }
    }
    if field.contains('|') {
        return Some("|");
    }
    if field.contains('[') {
        return Some("[");
    }
    if field.contains(']') {
        return Some("]");
    }
    None
}

/// A (subject, relation, object) fact. Fields are whitespace-normalized,
/// non-empty and free of grammar control tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    subject: String,
    relation: String,
    object: String,
}

impl Triple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Triple> {
        let fields = [normalize_ws(subject), normalize_ws(relation), normalize_ws(object)];
        for (name, f) in ["subject", "relation", "object"].iter().zip(&fields) {
            if f.is_empty() {
                return Err(Error::InvalidRecord(format!("empty {name}")));
            }
            if let Some(tok) = reserved_in(f) {
                return Err(Error::InvalidRecord(format!("{name} `{f}` contains reserved `{tok}`")));
            }
        }
        let [subject, relation, object] = fields;
        Ok(Triple {
            subject,
            relation,
            object,
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    /// Checks the extra restrictions a target grammar puts on fields.
    fn check_for(&self, format: FormatId) -> Result<()> {
        match format {
            FormatId::Tripleset => {
                for f in [&self.subject, &self.relation, &self.object] {
                    if f.split(' ').any(|w| w == ":") {
                        return Err(Error::InvalidRecord(format!(
                            "field `{f}` contains the tripleset separator `:`"
                        )));
                    }
                }
            }
            FormatId::Mr => {
                if self.relation == MR_NAME_KEY {
                    return Err(Error::InvalidRecord(
                        "relation `name` is reserved in MR".to_string(),
                    ));
                }
            }
            FormatId::Kg | FormatId::Totto => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableMeta {
    pub page_title: String,
    pub section_title: String,
}

/// A record in one linearization format. `meta` is present exactly for tables.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuredRecord {
    format: FormatId,
    triples: Vec<Triple>,
    meta: Option<TableMeta>,
}

impl StructuredRecord {
    pub fn new(format: FormatId, triples: Vec<Triple>, meta: Option<TableMeta>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::InvalidRecord("record has no triples".to_string()));
        }
        let meta = match (format, meta) {
            (FormatId::Totto, Some(m)) => {
                let m = TableMeta {
                    page_title: normalize_ws(&m.page_title),
                    section_title: normalize_ws(&m.section_title),
                };
                for t in [&m.page_title, &m.section_title] {
                    if let Some(tok) = reserved_in(t) {
                        return Err(Error::InvalidRecord(format!("title `{t}` contains reserved `{tok}`")));
                    }
                }
                Some(m)
            }
            (FormatId::Totto, None) => {
                return Err(Error::InvalidRecord("table record requires titles".to_string()))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidRecord(format!("{format} record cannot carry table titles")))
            }
            (_, None) => None,
        };
        for t in &triples {
            t.check_for(format)?;
        }
        Ok(StructuredRecord {
            format,
            triples,
            meta,
        })
    }

    /// Table record with the given titles.
    pub fn table(page_title: &str, section_title: &str, triples: Vec<Triple>) -> Result<Self> {
        Self::new(
            FormatId::Totto,
            triples,
            Some(TableMeta {
                page_title: page_title.to_string(),
                section_title: section_title.to_string(),
            }),
        )
    }

    pub fn format(&self) -> FormatId {
        self.format
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn meta(&self) -> Option<&TableMeta> {
        self.meta.as_ref()
    }

    /// Normalized form. Construction already normalizes every field, so
    /// this is the identity on well-built values; it is kept as the explicit
    /// comparison point for round trips.
    pub fn canonical(&self) -> StructuredRecord {
        StructuredRecord {
            format: self.format,
            triples: self
                .triples
                .iter()
                .map(|t| Triple {
                    subject: normalize_ws(&t.subject),
                    relation: normalize_ws(&t.relation),
                    object: normalize_ws(&t.object),
                })
                .collect(),
            meta: self.meta.as_ref().map(|m| TableMeta {
                page_title: normalize_ws(&m.page_title),
                section_title: normalize_ws(&m.section_title),
            }),
        }
    }

    /// Subject assumed for table cells that carry no row header.
    fn table_fallback_subject(&self) -> &str {
        match &self.meta {
            Some(m) if !m.page_title.is_empty() => &m.page_title,
            _ => TOTTO_DEFAULT_SUBJECT,
        }
    }
}

/// Directed labelled graph view of a record's content.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContentGraph {
    pub nodes: BTreeSet<String>,
    pub edges: Vec<(String, String, String)>,
}

pub fn serialize(record: &StructuredRecord) -> Result<String> {
    for t in &record.triples {
        t.check_for(record.format)?;
    }
    let out = match record.format {
        FormatId::Kg => record
            .triples
            .iter()
            .map(|t| format!("{KG_HEAD} {} {KG_TYPE} {} {KG_TAIL} {}", t.subject, t.relation, t.object))
            .collect::<Vec<_>>()
            .join(" "),
        FormatId::Tripleset => record
            .triples
            .iter()
            .map(|t| format!("{} : {} : {}", t.subject, t.relation, t.object))
            .collect::<Vec<_>>()
            .join(" | "),
        FormatId::Mr => {
            let mut items = Vec::new();
            let mut current: Option<&str> = None;
            for t in &record.triples {
                if current != Some(t.subject.as_str()) {
                    items.push(format!("{MR_NAME_KEY}[{}]", t.subject));
                    current = Some(&t.subject);
                }
                items.push(format!("{}[{}]", t.relation, t.object));
            }
            items.join(", ")
        }
        FormatId::Totto => {
            let meta = record.meta.clone().unwrap_or_default();
            let fallback = record.table_fallback_subject();
            let mut parts = vec![
                "<page_title>".to_string(),
                meta.page_title.clone(),
                "</page_title>".to_string(),
                "<section_title>".to_string(),
                meta.section_title.clone(),
                "</section_title>".to_string(),
                "<table>".to_string(),
            ];
            for t in &record.triples {
                parts.push(format!("<cell> {} <col_header> {} </col_header>", t.object, t.relation));
                if t.subject != fallback {
                    parts.push(format!("<row_header> {} </row_header>", t.subject));
                }
                parts.push("</cell>".to_string());
            }
            parts.push("</table>".to_string());
            normalize_ws(&parts.join(" "))
        }
    };
    Ok(out)
}

/// A token of a bracket/tag grammar with its byte offset.
#[derive(Debug, Clone, Copy)]
struct Lexeme<'a> {
    offset: usize,
    text: &'a str,
    marker: bool,
}

/// Splits `s` into whitespace-separated words, additionally cutting the
/// given marker strings out of words they are glued to.
fn lex<'a>(s: &'a str, markers: &[&str]) -> Vec<Lexeme<'a>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    let mut word_start: Option<usize> = None;
    while i < s.len() {
        if bytes[i] == b' ' {
            if let Some(ws) = word_start.take() {
                out.push(Lexeme {
                    offset: ws,
                    text: &s[ws..i],
                    marker: false,
                });
            }
            i += 1;
            continue;
        }
        if let Some(m) = markers.iter().find(|m| s[i..].starts_with(**m)) {
            if let Some(ws) = word_start.take() {
                out.push(Lexeme {
                    offset: ws,
                    text: &s[ws..i],
                    marker: false,
                });
            }
            out.push(Lexeme {
                offset: i,
                text: &s[i..i + m.len()],
                marker: true,
            });
            i += m.len();
            continue;
        }
        if word_start.is_none() {
            word_start = Some(i);
        }
        i += s[i..].chars().next().map_or(1, char::len_utf8);
    }
    if let Some(ws) = word_start {
        out.push(Lexeme {
            offset: ws,
            text: &s[ws..],
            marker: false,
        });
    }
    out
}

/// Collects consecutive non-marker words starting at `*pos` into one field.
fn take_words(lx: &[Lexeme<'_>], pos: &mut usize) -> String {
    let mut words = Vec::new();
    while *pos < lx.len() && !lx[*pos].marker {
        words.push(lx[*pos].text);
        *pos += 1;
    }
    words.join(" ")
}

fn offset_at(lx: &[Lexeme<'_>], pos: usize, len: usize) -> usize {
    lx.get(pos).map_or(len, |l| l.offset)
}

fn expect_marker(lx: &[Lexeme<'_>], pos: &mut usize, marker: &str, len: usize) -> std::result::Result<(), FormatError> {
    match lx.get(*pos) {
        Some(l) if l.marker && l.text == marker => {
            *pos += 1;
            Ok(())
        }
        Some(l) => Err(FormatError::new(l.offset, format!("expected `{marker}`, found `{}`", l.text))),
        None => Err(FormatError::new(len, format!("expected `{marker}`, found end of input"))),
    }
}

fn make_triple(s: &str, r: &str, o: &str, at: usize) -> std::result::Result<Triple, FormatError> {
    Triple::new(s, r, o).map_err(|e| FormatError::new(at, e.to_string()))
}

fn finish(format: FormatId, triples: Vec<Triple>, meta: Option<TableMeta>, len: usize) -> std::result::Result<StructuredRecord, FormatError> {
    StructuredRecord::new(format, triples, meta).map_err(|e| FormatError::new(len, e.to_string()))
}

fn parse_kg(s: &str) -> std::result::Result<StructuredRecord, FormatError> {
    let lx = lex(s, &[KG_HEAD, KG_TYPE, KG_TAIL]);
    let mut pos = 0;
    let mut triples = Vec::new();
    while pos < lx.len() {
        let at = lx[pos].offset;
        expect_marker(&lx, &mut pos, KG_HEAD, s.len())?;
        let subj = take_words(&lx, &mut pos);
        if subj.is_empty() {
            return Err(FormatError::new(offset_at(&lx, pos, s.len()), "empty head"));
        }
        expect_marker(&lx, &mut pos, KG_TYPE, s.len())?;
        let rel = take_words(&lx, &mut pos);
        if rel.is_empty() {
            return Err(FormatError::new(offset_at(&lx, pos, s.len()), "empty type"));
        }
        expect_marker(&lx, &mut pos, KG_TAIL, s.len())?;
        let obj = take_words(&lx, &mut pos);
        if obj.is_empty() {
            return Err(FormatError::new(offset_at(&lx, pos, s.len()), "empty tail"));
        }
        triples.push(make_triple(&subj, &rel, &obj, at)?);
    }
    finish(FormatId::Kg, triples, None, s.len())
}

fn parse_tripleset(s: &str) -> std::result::Result<StructuredRecord, FormatError> {
    let mut triples = Vec::new();
    let mut offset = 0;
    for part in s.split(" | ") {
        let fields: Vec<&str> = part.split(" : ").collect();
        if fields.len() != 3 {
            return Err(FormatError::new(
                offset,
                format!("expected `s : r : o`, found {} field(s)", fields.len()),
            ));
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(FormatError::new(offset, "empty field"));
        }
        let t = make_triple(fields[0], fields[1], fields[2], offset)?;
        t.check_for(FormatId::Tripleset)
            .map_err(|e| FormatError::new(offset, e.to_string()))?;
        triples.push(t);
        offset += part.len() + 3;
    }
    finish(FormatId::Tripleset, triples, None, s.len())
}

fn parse_mr(s: &str) -> std::result::Result<StructuredRecord, FormatError> {
    let mut triples = Vec::new();
    let mut subject: Option<(String, usize)> = None;
    let mut subject_used = true;
    let mut pos = 0;
    while pos < s.len() {
        let open = s[pos..]
            .find(['[', ']'])
            .map(|i| pos + i)
            .ok_or_else(|| FormatError::new(pos, "expected `key[value]`"))?;
        if &s[open..open + 1] == "]" {
            return Err(FormatError::new(open, "unbalanced `]`"));
        }
        let key = s[pos..open].trim();
        if key.is_empty() {
            return Err(FormatError::new(pos, "empty key"));
        }
        let close = s[open + 1..]
            .find(['[', ']'])
            .map(|i| open + 1 + i)
            .ok_or_else(|| FormatError::new(open, "unclosed `[`"))?;
        if &s[close..close + 1] == "[" {
            return Err(FormatError::new(close, "nested `[`"));
        }
        let value = s[open + 1..close].trim();
        if value.is_empty() {
            return Err(FormatError::new(open + 1, "empty value"));
        }
        if key == MR_NAME_KEY {
            if !subject_used {
                let (name, at) = subject.take().unwrap_or_default();
                return Err(FormatError::new(at, format!("subject `{name}` has no attributes")));
            }
            subject = Some((value.to_string(), pos));
            subject_used = false;
        } else {
            let (subj, _) = subject
                .as_ref()
                .ok_or_else(|| FormatError::new(pos, "MR must start with `name[...]`"))?;
            triples.push(make_triple(subj, key, value, pos)?);
            subject_used = true;
        }
        pos = close + 1;
        if pos < s.len() {
            let rest = &s[pos..];
            if let Some(r) = rest.strip_prefix(", ") {
                pos = s.len() - r.len();
            } else if let Some(r) = rest.strip_prefix(',') {
                pos = s.len() - r.len();
            } else {
                return Err(FormatError::new(pos, "expected `, ` between items"));
            }
            if pos >= s.len() {
                return Err(FormatError::new(pos, "trailing separator"));
            }
        }
    }
    if !subject_used {
        let (name, at) = subject.unwrap_or_default();
        return Err(FormatError::new(at, format!("subject `{name}` has no attributes")));
    }
    finish(FormatId::Mr, triples, None, s.len())
}

fn parse_totto(s: &str) -> std::result::Result<StructuredRecord, FormatError> {
    let lx = lex(s, &TOTTO_TAGS);
    let len = s.len();
    let mut pos = 0;
    expect_marker(&lx, &mut pos, "<page_title>", len)?;
    let page_title = take_words(&lx, &mut pos);
    expect_marker(&lx, &mut pos, "</page_title>", len)?;
    expect_marker(&lx, &mut pos, "<section_title>", len)?;
    let section_title = take_words(&lx, &mut pos);
    expect_marker(&lx, &mut pos, "</section_title>", len)?;
    expect_marker(&lx, &mut pos, "<table>", len)?;
    let fallback = if page_title.is_empty() {
        TOTTO_DEFAULT_SUBJECT.to_string()
    } else {
        page_title.clone()
    };
    let mut triples = Vec::new();
    loop {
        let Some(l) = lx.get(pos) else {
            return Err(FormatError::new(len, "missing `</table>`"));
        };
        match (l.marker, l.text) {
            (true, "</table>") => {
                pos += 1;
                break;
            }
            // Header-row declaration; carries no triple.
            (true, "<col_header>") => {
                pos += 1;
                if take_words(&lx, &mut pos).is_empty() {
                    return Err(FormatError::new(offset_at(&lx, pos, len), "empty column header"));
                }
                expect_marker(&lx, &mut pos, "</col_header>", len)?;
            }
            (true, "<cell>") => {
                let at = l.offset;
                pos += 1;
                let value = take_words(&lx, &mut pos);
                if value.is_empty() {
                    return Err(FormatError::new(offset_at(&lx, pos, len), "empty cell"));
                }
                expect_marker(&lx, &mut pos, "<col_header>", len)?;
                let rel = take_words(&lx, &mut pos);
                if rel.is_empty() {
                    return Err(FormatError::new(offset_at(&lx, pos, len), "empty column header"));
                }
                expect_marker(&lx, &mut pos, "</col_header>", len)?;
                let mut subj = fallback.clone();
                if matches!(lx.get(pos), Some(l) if l.marker && l.text == "<row_header>") {
                    pos += 1;
                    subj = take_words(&lx, &mut pos);
                    if subj.is_empty() {
                        return Err(FormatError::new(offset_at(&lx, pos, len), "empty row header"));
                    }
                    expect_marker(&lx, &mut pos, "</row_header>", len)?;
                }
                expect_marker(&lx, &mut pos, "</cell>", len)?;
                triples.push(make_triple(&subj, &rel, &value, at)?);
            }
            _ => {
                return Err(FormatError::new(l.offset, format!("unexpected `{}` in table", l.text)));
            }
        }
    }
    if let Some(l) = lx.get(pos) {
        return Err(FormatError::new(l.offset, "trailing input after `</table>`"));
    }
    finish(
        FormatId::Totto,
        triples,
        Some(TableMeta {
            page_title,
            section_title,
        }),
        len,
    )
}

/// Strict grammar match after whitespace normalization. Never panics.
pub fn parse(text: &str, format: FormatId) -> std::result::Result<StructuredRecord, FormatError> {
    let s = normalize_ws(text);
    if s.is_empty() {
        return Err(FormatError::new(0, "empty input"));
    }
    match format {
        FormatId::Kg => parse_kg(&s),
        FormatId::Tripleset => parse_tripleset(&s),
        FormatId::Mr => parse_mr(&s),
        FormatId::Totto => parse_totto(&s),
    }
}

/// Re-expresses `record` in `target`, keeping its triples in order.
pub fn convert(record: &StructuredRecord, target: FormatId) -> Result<StructuredRecord> {
    let meta = match (record.format, target) {
        (FormatId::Totto, FormatId::Totto) => record.meta.clone(),
        (_, FormatId::Totto) => Some(TableMeta::default()),
        _ => None,
    };
    StructuredRecord::new(target, record.triples.clone(), meta)
}

pub fn to_graph(record: &StructuredRecord) -> ContentGraph {
    let mut g = ContentGraph::default();
    let mut seen = BTreeSet::new();
    for t in &record.triples {
        let edge = (normalize_ws(&t.subject), normalize_ws(&t.relation), normalize_ws(&t.object));
        g.nodes.insert(edge.0.clone());
        g.nodes.insert(edge.2.clone());
        if seen.insert(edge.clone()) {
            g.edges.push(edge);
        }
    }
    g
}

/// Pseudo-text verbalization: `s r o` per triple joined by ` and `; tables
/// emit their titles first and then `o r` per cell.
pub fn rule_text(record: &StructuredRecord) -> String {
    let mut parts: Vec<String> = Vec::new();
    if let (FormatId::Totto, Some(meta)) = (record.format, &record.meta) {
        for title in [&meta.page_title, &meta.section_title] {
            if !title.is_empty() {
                parts.push(title.clone());
            }
        }
        parts.extend(record.triples.iter().map(|t| format!("{} {}", t.object, t.relation)));
    } else {
        parts.extend(
            record
                .triples
                .iter()
                .map(|t| format!("{} {} {}", t.subject, t.relation, t.object)),
        );
    }
    parts.join(" and ")
}
