//! Non-parallel sources, the word tokenizer, temperature-mixed source
//! sampling and the synthetic multi-source world generator.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, FormatId, StructuredRecord, Triple, KG_HEAD, KG_TAIL, KG_TYPE, TOTTO_TAGS};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const BLANK: &str = "<blank>";
pub const STYLE: &str = "[STYLE]";
pub const PREFIX_HEAD: &str = "Generate";
pub const PREFIX_TEXT: &str = "text:";
pub const PREFIX_DATA: &str = "data:";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const BLANK_ID: u32 = 4;
pub const STYLE_ID: u32 = 5;

/// Grammar markup kept as atomic tokens.
const MARKUP: [&str; 8] = [KG_HEAD, KG_TYPE, KG_TAIL, "|", ":", "name[", "]", "],"];

pub fn reserved_tokens() -> Vec<&'static str> {
    let mut v = vec![PAD, BOS, EOS, UNK, BLANK, STYLE, PREFIX_HEAD, PREFIX_TEXT, PREFIX_DATA];
    v.extend(MARKUP);
    v.extend(TOTTO_TAGS);
    v
}

fn is_atomic(word: &str) -> bool {
    word == STYLE || MARKUP.contains(&word) || TOTTO_TAGS.contains(&word)
}

/// Whitespace tokenization with MR brackets split off: `name[The` becomes
/// `name[` + `The`, and `Phoenix],` becomes `Phoenix` + `],`.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in s.split_whitespace() {
        if is_atomic(word) {
            out.push(word.to_string());
            continue;
        }
        let mut rest = word;
        while !rest.is_empty() {
            if let Some(i) = rest.find(']') {
                if i > 0 {
                    push_open_split(&rest[..i], &mut out);
                }
                // `]` plus any following non-bracket punctuation run, e.g. `],`
                let tail = &rest[i..];
                let end = tail[1..].find(['[', ']']).map_or(tail.len(), |j| j + 1);
                out.push(tail[..end].to_string());
                rest = &tail[end..];
            } else {
                push_open_split(rest, &mut out);
                rest = "";
            }
        }
    }
    out
}

fn push_open_split(mut piece: &str, out: &mut Vec<String>) {
    while let Some(i) = piece.find('[') {
        out.push(piece[..=i].to_string());
        piece = &piece[i + 1..];
    }
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
}

/// Inverse of [`tokenize`]: single spaces, except none after an opening
/// `…[` token or before a closing `]…` token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for t in tokens {
        let t = t.as_ref();
        let glue = glue_next || t.starts_with(']');
        if !glue {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = t.ends_with('[');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskPrefix {
    /// `Generate text:`
    Text,
    /// `Generate data:`
    Data,
}

/// Token ids framed by BOS … EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>, max_len: usize) -> Result<TokenSeq> {
        if ids.len() > max_len {
            return Err(Error::SeqTooLong {
                len: ids.len(),
                max_len,
            });
        }
        Ok(TokenSeq { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    n_reserved: usize,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let n_reserved = reserved_tokens().len();
        let mut v = Vocab {
            tokens,
            index: HashMap::new(),
            n_reserved,
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn reserved_only() -> Vocab {
        Vocab::from_tokens(reserved_tokens().into_iter().map(String::from).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_reserved(&self) -> usize {
        self.n_reserved
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Grammar tokens that noise functions must leave in place.
    pub fn is_structural(&self, id: u32) -> bool {
        let t = self.token(id);
        id == BOS_ID
            || id == EOS_ID
            || id == PAD_ID
            || MARKUP.contains(&t)
            || TOTTO_TAGS.contains(&t)
            || (t.ends_with('[') && t.len() > 1)
            || t.starts_with(']')
    }

    /// Control tokens stripped by [`Vocab::decode`].
    pub fn is_control(&self, id: u32) -> bool {
        let t = self.token(id);
        matches!(t, PAD | BOS | EOS | STYLE | PREFIX_HEAD | PREFIX_TEXT | PREFIX_DATA)
    }

    pub fn prefix_ids(&self, prefix: TaskPrefix) -> [u32; 2] {
        let second = match prefix {
            TaskPrefix::Text => PREFIX_TEXT,
            TaskPrefix::Data => PREFIX_DATA,
        };
        [self.id(PREFIX_HEAD), self.id(second)]
    }

    pub fn payload_ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Encoder input: BOS, task prefix, optional `[STYLE]`, payload, EOS.
    pub fn encode(&self, text: &str, prefix: TaskPrefix, style: bool, max_len: usize) -> Result<TokenSeq> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.prefix_ids(prefix));
        if style {
            ids.push(STYLE_ID);
        }
        ids.extend(self.payload_ids(text));
        ids.push(EOS_ID);
        TokenSeq::new(ids, max_len)
    }

    /// Decoder target: BOS, payload, EOS.
    pub fn encode_target(&self, text: &str, max_len: usize) -> Result<TokenSeq> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.payload_ids(text));
        ids.push(EOS_ID);
        TokenSeq::new(ids, max_len)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&id| !self.is_control(id))
            .map(|&id| self.token(id))
            .collect();
        detokenize(&toks)
    }
}

impl<'de> Vocab {
    pub fn from_json(s: &'de str) -> Result<Vocab> {
        let mut v: Vocab = serde_json::from_str(s)?;
        v.rebuild_index();
        Ok(v)
    }
}

/// One corpus: unaligned texts and records sharing a format, plus optional
/// aligned pairs held out for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub name: String,
    pub format: FormatId,
    pub texts: Vec<String>,
    pub records: Vec<StructuredRecord>,
    pub eval_pairs: Vec<(String, StructuredRecord)>,
    /// Aligned originals of the training halves; only the supervised
    /// baseline reads them.
    pub train_pairs: Vec<(String, StructuredRecord)>,
}

impl Source {
    /// Size used for temperature mixing: texts plus records.
    pub fn size(&self) -> usize {
        self.texts.len() + self.records.len()
    }
}

/// Builds the vocabulary over all training texts and serialized records.
/// Tokens seen fewer than `min_count` times are left out (they map to UNK).
pub fn build_vocab(sources: &[Source], min_count: usize) -> Result<Vocab> {
    if sources.is_empty() || sources.iter().all(|s| s.texts.is_empty() && s.records.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut see = |s: &str| {
        for t in tokenize(s) {
            let c = counts.entry(t.clone()).or_insert(0);
            if *c == 0 {
                order.push(t);
            }
            *c += 1;
        }
    };
    for src in sources {
        for t in &src.texts {
            see(t);
        }
        for r in &src.records {
            see(&formats::serialize(r)?);
        }
    }
    let mut tokens: Vec<String> = reserved_tokens().into_iter().map(String::from).collect();
    let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
    for t in order {
        if counts[&t] >= min_count && !reserved.contains(&t) {
            tokens.push(t);
        }
    }
    Ok(Vocab::from_tokens(tokens))
}

/// Mixing probabilities `n_i^(1/T) / Σ_j n_j^(1/T)`.
pub fn source_probabilities(sizes: &[usize], temperature: f64) -> Vec<f64> {
    let w: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(1.0 / temperature)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn sample_source<R: Rng + ?Sized>(sources: &[Source], temperature: f64, rng: &mut R) -> usize {
    let sizes: Vec<usize> = sources.iter().map(Source::size).collect();
    sample_from(&source_probabilities(&sizes, temperature), rng)
}

fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub source_index: usize,
    pub format: FormatId,
    pub texts: Vec<String>,
    pub records: Vec<StructuredRecord>,
}

/// Picks a source by temperature mixing, then draws texts and records
/// independently, each without replacement.
pub fn next_batch<R: Rng + ?Sized>(sources: &[Source], batch_size: usize, temperature: f64, rng: &mut R) -> MixedBatch {
    let i = sample_source(sources, temperature, rng);
    let src = &sources[i];
    let nt = batch_size.min(src.texts.len());
    let nr = batch_size.min(src.records.len());
    let texts = sample_indices(rng, src.texts.len(), nt)
        .into_iter()
        .map(|j| src.texts[j].clone())
        .collect();
    let records = sample_indices(rng, src.records.len(), nr)
        .into_iter()
        .map(|j| src.records[j].clone())
        .collect();
    MixedBatch {
        source_index: i,
        format: src.format,
        texts,
        records,
    }
}

// ---------------------------------------------------------------------------
// Synthetic world
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub format: FormatId,
    pub n_texts: usize,
    pub n_records: usize,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub sources: Vec<SourceSpec>,
    pub n_entities: usize,
    pub n_relations: usize,
    pub values_per_relation: usize,
    pub n_templates_per_relation: usize,
    pub max_triples: usize,
    pub max_len: usize,
}

pub const DOMAINS: [&str; 4] = ["albums", "ships", "restaurants", "fighters"];

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            sources: DOMAINS
                .iter()
                .zip(FormatId::ALL)
                .map(|(name, format)| SourceSpec {
                    name: name.to_string(),
                    format,
                    n_texts: 500,
                    n_records: 500,
                    n_eval: 100,
                })
                .collect(),
            n_entities: 40,
            n_relations: 6,
            values_per_relation: 8,
            n_templates_per_relation: 3,
            max_triples: 4,
            max_len: 64,
        }
    }
}

/// Relation labels per domain; sources beyond the table reuse them with a suffix.
const RELATIONS: [[&str; 8]; 4] = [
    ["artist", "genre", "label", "producer", "language", "studio", "format", "length"],
    ["builder", "country", "class", "operator", "homeport", "engine", "status", "tonnage"],
    ["food", "area", "price", "rating", "near", "owner", "seating", "style"],
    ["division", "coach", "nationality", "stance", "gym", "record", "reach", "nickname"],
];

/// Table section titles per domain.
const SECTIONS: [&str; 4] = ["track listing", "service history", "overview", "career record"];

/// Clause patterns; `{s}`, `{r}`, `{o}` are subject, relation and object.
pub const TEMPLATE_PATTERNS: [&str; 6] = [
    "{s} has {r} {o}",
    "the {r} of {s} is {o}",
    "{o} is the {r} of {s}",
    "{s} 's {r} is {o}",
    "for {s} the {r} is {o}",
    "{s} is listed with {r} {o}",
];

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn pseudo_word<R: Rng + ?Sized>(rng: &mut R, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.random_range(0..ONSETS.len())], VOWELS[rng.random_range(0..VOWELS.len())]))
        .collect()
}

/// Names, relation labels, values and surface templates of one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceLexicon {
    pub subjects: Vec<String>,
    pub relations: Vec<String>,
    /// `values[r]` are the admissible objects of relation `r`.
    pub values: Vec<Vec<String>>,
    /// `templates[r]` are indices into [`TEMPLATE_PATTERNS`].
    pub templates: Vec<Vec<usize>>,
    pub section: String,
}

impl SourceLexicon {
    pub fn realize(&self, relation: usize, template: usize, subject: &str, object: &str) -> String {
        TEMPLATE_PATTERNS[self.templates[relation][template]]
            .replace("{s}", subject)
            .replace("{r}", &self.relations[relation])
            .replace("{o}", object)
    }
}

fn unique_words<R: Rng + ?Sized>(rng: &mut R, n: usize, taken: &mut BTreeSet<String>, make: impl Fn(&mut R) -> String) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = make(rng);
        let key = w.to_lowercase();
        if taken.insert(key) {
            out.push(w);
        }
    }
    out
}

fn validate_world(config: &WorldConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.to_string()));
    if config.sources.is_empty() {
        return bad("no sources");
    }
    if config.n_entities == 0 || config.n_relations == 0 || config.values_per_relation == 0 {
        return bad("entities, relations and values per relation must be positive");
    }
    if config.n_relations > RELATIONS[0].len() {
        return bad("at most 8 relations per source");
    }
    if config.n_templates_per_relation == 0 || config.n_templates_per_relation > TEMPLATE_PATTERNS.len() {
        return bad("templates per relation must be in 1..=6");
    }
    if config.max_triples == 0 || config.max_triples > config.n_relations {
        return bad("max_triples must be in 1..=n_relations");
    }
    for s in &config.sources {
        if s.n_texts == 0 || s.n_records == 0 {
            return bad("every source needs texts and records");
        }
    }
    Ok(())
}

/// Deterministic lexicon of every source.
pub fn world_lexicons(seed: u64, config: &WorldConfig) -> Result<Vec<SourceLexicon>> {
    validate_world(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e81_c0de);
    let mut taken: BTreeSet<String> = BTreeSet::new();
    for p in TEMPLATE_PATTERNS {
        for w in p.split(' ') {
            taken.insert(w.to_lowercase());
        }
    }
    taken.insert("and".into());
    let mut lexicons = Vec::new();
    for (si, _) in config.sources.iter().enumerate() {
        let domain = si % RELATIONS.len();
        let suffix = if si >= RELATIONS.len() { format!("{}", si / RELATIONS.len() + 1) } else { String::new() };
        let relations: Vec<String> = RELATIONS[domain][..config.n_relations]
            .iter()
            .map(|r| format!("{r}{suffix}"))
            .collect();
        for r in &relations {
            taken.insert(r.clone());
        }
        let subjects = unique_words(&mut rng, config.n_entities, &mut taken, |r| capitalize(&pseudo_word(r, 2)));
        let mut values = Vec::new();
        for _ in 0..config.n_relations {
            values.push(unique_words(&mut rng, config.values_per_relation, &mut taken, |r| {
                if r.random_bool(0.25) {
                    format!("{} {}", pseudo_word(r, 2), pseudo_word(r, 1))
                } else {
                    pseudo_word(r, 2)
                }
            }));
        }
        let mut templates = Vec::new();
        for _ in 0..config.n_relations {
            let picks = sample_indices(&mut rng, TEMPLATE_PATTERNS.len(), config.n_templates_per_relation).into_vec();
            templates.push(picks);
        }
        lexicons.push(SourceLexicon {
            subjects,
            relations,
            values,
            templates,
            section: SECTIONS[domain].to_string(),
        });
    }
    Ok(lexicons)
}

/// One ground-truth record and a realization of it, drawn from the lexicon.
fn draw_pair<R: Rng + ?Sized>(lex: &SourceLexicon, format: FormatId, max_triples: usize, rng: &mut R) -> Result<(String, StructuredRecord)> {
    let subject = &lex.subjects[rng.random_range(0..lex.subjects.len())];
    let k = rng.random_range(1..=max_triples);
    let rels = sample_indices(rng, lex.relations.len(), k).into_vec();
    let mut triples = Vec::with_capacity(k);
    let mut clauses = Vec::with_capacity(k);
    for &r in &rels {
        let object = &lex.values[r][rng.random_range(0..lex.values[r].len())];
        let template = rng.random_range(0..lex.templates[r].len());
        clauses.push(lex.realize(r, template, subject, object));
        triples.push(Triple::new(subject, &lex.relations[r], object)?);
    }
    let record = match format {
        FormatId::Totto => StructuredRecord::table(subject, &lex.section, triples)?,
        f => StructuredRecord::new(f, triples, None)?,
    };
    Ok((clauses.join(" and ") + " .", record))
}

/// Builds the synthetic sources: aligned pairs are generated and split so
/// that one half contributes only its texts and the other only its records;
/// a further disjoint slice is kept as aligned evaluation pairs.
pub fn generate_synthetic_world(seed: u64, config: &WorldConfig) -> Result<Vec<Source>> {
    let lexicons = world_lexicons(seed, config)?;
    let mut sources = Vec::new();
    for (si, (spec, lex)) in config.sources.iter().zip(&lexicons).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(si as u64 + 1));
        let total = spec.n_texts + spec.n_records + spec.n_eval;
        let mut pairs = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while pairs.len() < total {
            attempts += 1;
            if attempts > total * 100 {
                return Err(Error::Config("cannot fit sequences within max_len".into()));
            }
            let (text, record) = draw_pair(lex, spec.format, config.max_triples, &mut rng)?;
            let data = formats::serialize(&record)?;
            // framing adds BOS, two prefix tokens, [STYLE] and EOS
            let longest = tokenize(&text).len().max(tokenize(&data).len()) + 5;
            if longest > config.max_len {
                continue;
            }
            check_expressible(lex, &text, &record)?;
            pairs.push((text, record));
        }
        let eval_pairs = pairs.split_off(spec.n_texts + spec.n_records);
        let texts = pairs[..spec.n_texts].iter().map(|(t, _)| t.clone()).collect();
        let records = pairs[spec.n_texts..].iter().map(|(_, r)| r.clone()).collect();
        sources.push(Source {
            name: spec.name.clone(),
            format: spec.format,
            texts,
            records,
            eval_pairs,
            train_pairs: pairs,
        });
    }
    Ok(sources)
}

/// Every triple of `record` must be voiced in `text` by one of its
/// relation's templates, and every clause of `text` must voice a triple.
fn check_expressible(lex: &SourceLexicon, text: &str, record: &StructuredRecord) -> Result<()> {
    let body = text.trim_end_matches(" .");
    let clauses: Vec<&str> = body.split(" and ").collect();
    let mut covered = vec![false; clauses.len()];
    for t in record.triples() {
        let r = lex
            .relations
            .iter()
            .position(|x| x == t.relation())
            .ok_or_else(|| Error::Config(format!("unknown relation {}", t.relation())))?;
        let mut found = false;
        for k in 0..lex.templates[r].len() {
            let s = lex.realize(r, k, t.subject(), t.object());
            for (ci, c) in clauses.iter().enumerate() {
                if *c == s && !covered[ci] {
                    covered[ci] = true;
                    found = true;
                    break;
                }
            }
            if found {
                break;
            }
        }
        if !found {
            return Err(Error::Config(format!("triple {t:?} not voiced by `{text}`")));
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::Config(format!("`{text}` voices facts absent from its record")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// On-disk corpus
// ---------------------------------------------------------------------------

/// Writes one directory per source with `texts.txt`, `records.txt`,
/// `format` and, when present, `eval.tsv` and `pairs.tsv` (TAB-separated
/// text and serialized record).
pub fn write_corpus(dir: &Path, sources: &[Source]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, src) in sources.iter().enumerate() {
        let sdir = dir.join(format!("{:02}_{}", i, src.name));
        fs::create_dir_all(&sdir)?;
        let mut f = fs::File::create(sdir.join("texts.txt"))?;
        for t in &src.texts {
            writeln!(f, "{t}")?;
        }
        let mut f = fs::File::create(sdir.join("records.txt"))?;
        for r in &src.records {
            writeln!(f, "{}", formats::serialize(r)?)?;
        }
        fs::write(sdir.join("format"), format!("{}\n", src.format))?;
        write_pairs(&sdir.join("eval.tsv"), &src.eval_pairs)?;
        write_pairs(&sdir.join("pairs.tsv"), &src.train_pairs)?;
    }
    Ok(())
}

fn write_pairs(path: &Path, pairs: &[(String, StructuredRecord)]) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    let mut f = fs::File::create(path)?;
    for (t, r) in pairs {
        writeln!(f, "{t}\t{}", formats::serialize(r)?)?;
    }
    Ok(())
}

fn read_pairs(path: &Path, format: FormatId) -> Result<Vec<(String, StructuredRecord)>> {
    let mut pairs = Vec::new();
    if !path.exists() {
        return Ok(pairs);
    }
    for line in read_lines(path)? {
        let (t, r) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("pair line without TAB: {line}")))?;
        pairs.push((t.to_string(), formats::parse(r, format)?));
    }
    Ok(pairs)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn read_source(sdir: &Path) -> Result<Source> {
    let format: FormatId = fs::read_to_string(sdir.join("format"))?.trim().parse()?;
    let texts = read_lines(&sdir.join("texts.txt"))?;
    let records = read_lines(&sdir.join("records.txt"))?
        .iter()
        .map(|l| formats::parse(l, format).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    let eval_pairs = read_pairs(&sdir.join("eval.tsv"), format)?;
    let train_pairs = read_pairs(&sdir.join("pairs.tsv"), format)?;
    let name = sdir
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.split_once('_').map_or(n, |(_, rest)| rest).to_string())
        .unwrap_or_default();
    Ok(Source {
        name,
        format,
        texts,
        records,
        eval_pairs,
        train_pairs,
    })
}

/// Reads every source subdirectory of `dir`, in name order.
pub fn read_corpus(dir: &Path) -> Result<Vec<Source>> {
    let mut dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("format").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    dirs.iter().map(|d| read_source(d)).collect()
}
