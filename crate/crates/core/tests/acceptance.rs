//! Acceptance suite: runs criteria 1–12 and prints one PASS/FAIL line each.
//!
//! Criteria 7–10 train several desk-scale models and take roughly half an
//! hour on one core. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 1 2 6`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cyclegen::corpus::{build_vocab, reserved_tokens, Source, Vocab, WorldConfig, BLANK_ID};
use cyclegen::experiment::{evaluate, gradient_check, EvalOptions, Evaluation, MeanCi, Preset};
use cyclegen::formats::{self, FormatId, StructuredRecord, Triple};
use cyclegen::metrics::{self, PairOutcome};
use cyclegen::model::{mmd, mmd_bandwidth, style_entropy_bound, ModelConfig};
use cyclegen::nn::{Tape, Tensor};
use cyclegen::noise::{self, NoiseConfig, NoiseKind};
use cyclegen::training::{self, TrainConfig, TrainOutcome};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn triple(s: &str, r: &str, o: &str) -> Triple {
    Triple::new(s, r, o).unwrap()
}

// ---------------------------------------------------------------- 1

const NORD: &str = "[HEAD] Nord (Year of No Light album) [TYPE] artist [TAIL] Year of No Light \
[HEAD] Nord (Year of No Light album) [TYPE] genre [TAIL] Post-metal \
[HEAD] Nord (Year of No Light album) [TYPE] record label [TAIL] Crucial Blast";
const NORD_RULE: &str = "Nord (Year of No Light album) artist Year of No Light and \
Nord (Year of No Light album) record label Crucial Blast and \
Nord (Year of No Light album) genre Post-metal";
const ARA: &str = "ARA Veinticinco de Mayo (V-2) : length : 192000.0 (millimetres) | \
ARA Veinticinco de Mayo (V-2) : country : Argentina";
const ARA_RULE: &str = "ARA Veinticinco de Mayo (V-2) length 192000.0 (millimetres) and \
ARA Veinticinco de Mayo (V-2) country Argentina";
const PHOENIX: &str = "name[The Phoenix], eatType[pub], food[French], priceRange[more than £30], \
customer rating[5 out of 5], area[riverside], familyFriendly[no], \
near[Crowne Plaza Hotel]";
const PHOENIX_RULE: &str = "The Phoenix eatType pub and The Phoenix priceRange more than £30 and \
The Phoenix area riverside and The Phoenix near Crowne Plaza Hotel and \
The Phoenix name The Phoenix and The Phoenix customer rating 5 out of 5 and \
The Phoenix food French and The Phoenix familyFriendly no";
const GOLOVKIN: &str = "<page_title> Gennady Golovkin vs. Daniel Jacobs </page_title> \
<section_title> CompuBox stats </section_title> \
<table> <cell> Golovkin <col_header> Fighter </col_header> </cell> \
<cell> 231/615 <col_header> Total punches </col_header> </cell> \
<cell> Jacobs <col_header> Fighter </col_header> </cell> \
<cell> 175/541 <col_header> Total punches </col_header> </cell> </table>";
const GOLOVKIN_RULE: &str = "Gennady Golovkin vs. Daniel Jacobs and CompuBox stats and Golovkin Fighter and \
231/615 Total punches and Jacobs Fighter and 175/541 Total punches";

fn criterion_1() -> Outcome {
    let nord_subject = "Nord (Year of No Light album)";
    let nord = StructuredRecord::new(
        FormatId::Kg,
        vec![
            triple(nord_subject, "artist", "Year of No Light"),
            triple(nord_subject, "genre", "Post-metal"),
            triple(nord_subject, "record label", "Crucial Blast"),
        ],
        None,
    )
    .unwrap();
    let ara_subject = "ARA Veinticinco de Mayo (V-2)";
    let ara = StructuredRecord::new(
        FormatId::Tripleset,
        vec![
            triple(ara_subject, "length", "192000.0 (millimetres)"),
            triple(ara_subject, "country", "Argentina"),
        ],
        None,
    )
    .unwrap();
    let phoenix_items = [
        ("eatType", "pub"),
        ("food", "French"),
        ("priceRange", "more than £30"),
        ("customer rating", "5 out of 5"),
        ("area", "riverside"),
        ("familyFriendly", "no"),
        ("near", "Crowne Plaza Hotel"),
    ];
    let phoenix = StructuredRecord::new(
        FormatId::Mr,
        phoenix_items.iter().map(|(r, o)| triple("The Phoenix", r, o)).collect(),
        None,
    )
    .unwrap();
    let title = "Gennady Golovkin vs. Daniel Jacobs";
    let golovkin = StructuredRecord::table(
        title,
        "CompuBox stats",
        vec![
            triple(title, "Fighter", "Golovkin"),
            triple(title, "Total punches", "231/615"),
            triple(title, "Fighter", "Jacobs"),
            triple(title, "Total punches", "175/541"),
        ],
    )
    .unwrap();

    let mut checked = 0;
    for (name, rec, golden) in [
        ("KG Nord", &nord, NORD),
        ("ARA tripleset", &ara, ARA),
        ("Phoenix MR", &phoenix, PHOENIX),
        ("Golovkin ToTTo", &golovkin, GOLOVKIN),
    ] {
        let s = formats::serialize(rec).map_err(|e| e.to_string())?;
        check(ws(&s) == ws(golden), format!("{name} serialize: {s}"))?;
        let parsed = formats::parse(golden, rec.format()).map_err(|e| format!("{name} parse: {e}"))?;
        check(parsed == rec.canonical(), format!("{name} parse mismatch"))?;
        checked += 1;
    }

    // The golden rule outputs list triples in a different order than
    // the linearized inputs; the records below follow the output order.
    let nord_out = StructuredRecord::new(
        FormatId::Kg,
        vec![
            triple(nord_subject, "artist", "Year of No Light"),
            triple(nord_subject, "record label", "Crucial Blast"),
            triple(nord_subject, "genre", "Post-metal"),
        ],
        None,
    )
    .unwrap();
    // The MR output also verbalizes the `name` key, which MR cannot carry
    // as a relation, so it is checked through the KG view of the same facts.
    let phoenix_out = StructuredRecord::new(
        FormatId::Kg,
        [
            ("eatType", "pub"),
            ("priceRange", "more than £30"),
            ("area", "riverside"),
            ("near", "Crowne Plaza Hotel"),
            ("name", "The Phoenix"),
            ("customer rating", "5 out of 5"),
            ("food", "French"),
            ("familyFriendly", "no"),
        ]
        .iter()
        .map(|(r, o)| triple("The Phoenix", r, o))
        .collect(),
        None,
    )
    .unwrap();
    for (name, rec, golden) in [
        ("Nord rule", &nord_out, NORD_RULE),
        ("ARA rule", &ara, ARA_RULE),
        ("Phoenix rule", &phoenix_out, PHOENIX_RULE),
        ("Golovkin rule", &golovkin, GOLOVKIN_RULE),
    ] {
        let (input, target) = noise::rule_noise_data_to_text(rec).map_err(|e| e.to_string())?;
        check(ws(&target) == ws(golden), format!("{name}: {target}"))?;
        check(input == formats::serialize(rec).unwrap(), format!("{name}: input is not the linearization"))?;
        checked += 1;
    }
    // every clause of the MR rule output except the `name` one comes from the MR record itself
    let mr_rule = formats::rule_text(&phoenix);
    for clause in PHOENIX_RULE.split(" and ").map(ws).filter(|c| !c.contains(" name ")) {
        check(mr_rule.split(" and ").any(|c| c == clause), format!("Phoenix MR rule lacks `{clause}`"))?;
    }
    Ok(format!("{checked} golden strings reproduced"))
}

// ---------------------------------------------------------------- 2

fn word() -> impl Strategy<Value = String> {
    proptest::sample::select(vec![
        "alpha", "beta", "gamma", "delta", "Nord", "Post-metal", "192000.0", "(V-2)", "£30", "5", "x", "Über", "a.b",
    ])
    .prop_map(String::from)
}

fn field() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..4).prop_map(|w| w.join(" "))
}

fn relation() -> impl Strategy<Value = String> {
    field().prop_filter("name is reserved in MR", |r| r != "name")
}

fn record_content() -> impl Strategy<Value = (Vec<(String, String, String)>, String, String)> {
    (
        prop::collection::vec((field(), relation(), field()), 1..6),
        prop::collection::vec(word(), 0..3).prop_map(|w| w.join(" ")),
        prop::collection::vec(word(), 0..3).prop_map(|w| w.join(" ")),
    )
}

fn build(format: FormatId, triples: &[(String, String, String)], page: &str, section: &str) -> StructuredRecord {
    let ts: Vec<Triple> = triples.iter().map(|(s, r, o)| triple(s, r, o)).collect();
    if format == FormatId::Totto {
        StructuredRecord::table(page, section, ts).unwrap()
    } else {
        StructuredRecord::new(format, ts, None).unwrap()
    }
}

fn criterion_2() -> Outcome {
    let cases = 10_000;
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner
        .run(&record_content(), |(triples, page, section)| {
            for a in FormatId::ALL {
                let r = build(a, &triples, &page, &section);
                let s = formats::serialize(&r).unwrap();
                let back = formats::parse(&s, a);
                prop_assert_eq!(back.as_ref().ok(), Some(&r.canonical()), "{} round trip of {}", a, s);
                for b in FormatId::ALL {
                    let c = formats::convert(&r, b).unwrap();
                    prop_assert_eq!(c.format(), b);
                    prop_assert_eq!(c.triples(), r.triples());
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} records x 4 formats round-trip, 16 conversions each"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let r = gradient_check(11, 4, 1e-5).map_err(|e| e.to_string())?;
    check(r.checked >= 100, format!("only {} coordinates", r.checked))?;
    check(r.max_rel_error < 1e-4, format!("max relative error {:.3e} at {:?}", r.max_rel_error, r.worst))?;
    Ok(format!("{} coordinates, max relative error {:.2e}", r.checked, r.max_rel_error))
}

// ---------------------------------------------------------------- 4

fn mmd_oracle(q: &[Vec<f64>], p: &[Vec<f64>], sigma_sq: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d / (2.0 * sigma_sq)).exp()
    };
    let within = |x: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    s += k(&x[i], &x[j]);
                }
            }
        }
        s / (x.len() * (x.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in q {
        for b in p {
            cross += k(a, b);
        }
    }
    within(q) + within(p) - 2.0 * cross / (q.len() * p.len()) as f64
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..30 {
        let d = 1 + trial % 8;
        let (n, m) = (2 + trial % 7, 3 + (trial * 5) % 11);
        let q = gaussian_rows(&mut rng, n, d, 0.3 * (trial % 3) as f64, 1.0 + 0.1 * trial as f64);
        let p = gaussian_rows(&mut rng, m, d, 0.0, 1.0);
        let sigma_sq = mmd_bandwidth(d);
        let want = mmd_oracle(&q, &p, sigma_sq);
        let got = mmd(&to_tensor(&q), &to_tensor(&p), sigma_sq);
        let mut tape = Tape::new();
        let qv = tape.input(to_tensor(&q));
        let tv = tape.mmd(qv, to_tensor(&p), sigma_sq).map_err(|e| e.to_string())?;
        let taped = tape.value(tv).item();
        worst = worst.max((got - want).abs()).max((taped - want).abs());
    }
    check(worst <= 1e-12, format!("deviation from the double-loop oracle {worst:.3e}"))?;
    let d = 8;
    let a = gaussian_rows(&mut rng, 512, d, 0.0, 1.0);
    let b = gaussian_rows(&mut rng, 512, d, 0.0, 1.0);
    let same = mmd(&to_tensor(&a), &to_tensor(&b), mmd_bandwidth(d));
    check(same.abs() < 0.05, format!("same-distribution MMD {same}"))?;
    Ok(format!("oracle deviation {worst:.1e}, same-distribution MMD {same:.2e}"))
}

// ---------------------------------------------------------------- 5

fn noise_vocab() -> (Vocab, Vec<u32>) {
    let mut tokens: Vec<String> = reserved_tokens().into_iter().map(String::from).collect();
    let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
    tokens.extend(words.iter().cloned());
    let v = Vocab::from_tokens(tokens);
    let ids = words.iter().map(|w| v.id(w)).collect();
    (v, ids)
}

fn criterion_5() -> Outcome {
    let (v, seq) = noise_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = 100_000;
    let mut report = Vec::new();
    for (name, p) in [("drop", 0.1), ("blank", 0.2), ("repeat", 0.2)] {
        let (mut n, mut hits) = (0usize, 0usize);
        while n < target {
            hits += match name {
                "drop" => seq.len() - noise::drop(&seq, p, &v, &mut rng).len(),
                "blank" => noise::blank(&seq, p, &v, &mut rng).iter().filter(|&&t| t == BLANK_ID).count(),
                _ => noise::repeat(&seq, p, &v, &mut rng).len() - seq.len(),
            };
            n += seq.len();
        }
        let rate = hits as f64 / n as f64;
        check((rate - p).abs() <= 0.01, format!("{name} rate {rate:.4} vs {p}"))?;
        report.push(format!("{name} {rate:.4}"));
    }
    let zero = NoiseConfig {
        p_drop: 0.0,
        p_blank: 0.0,
        p_repeat: 0.0,
        ..NoiseConfig::default()
    };
    let mut no_swap = zero.clone();
    no_swap.enabled.remove(&NoiseKind::Swap);
    for _ in 0..1000 {
        check(noise::drop(&seq, 0.0, &v, &mut rng) == seq, "drop(p=0) changed the input")?;
        check(noise::blank(&seq, 0.0, &v, &mut rng) == seq, "blank(p=0) changed the input")?;
        check(noise::repeat(&seq, 0.0, &v, &mut rng) == seq, "repeat(p=0) changed the input")?;
        check(noise::swap(&seq, 0, &v, &mut rng) == seq, "swap(window=0) changed the input")?;
        check(noise::corrupt(&seq, &NoiseConfig::none(), &v, &mut rng) == seq, "corrupt(none) changed the input")?;
        check(noise::corrupt(&seq, &no_swap, &v, &mut rng) == seq, "corrupt(zero rates) changed the input")?;
    }
    let short: Vec<u32> = seq[..12].to_vec();
    let mut max_disp = 0;
    for trial in 0..10_000 {
        let window = 1 + trial % 5;
        let out = noise::swap(&short, window, &v, &mut rng);
        let mut sorted = out.clone();
        sorted.sort_unstable();
        let mut orig = short.clone();
        orig.sort_unstable();
        check(sorted == orig, "swap is not a permutation")?;
        for (i, t) in out.iter().enumerate() {
            let from = short.iter().position(|x| x == t).unwrap();
            check(from.abs_diff(i) <= window, format!("swap moved a token {} > {window}", from.abs_diff(i)))?;
            max_disp = max_disp.max(from.abs_diff(i));
        }
    }
    Ok(format!("{}, zero-noise identity, swap cap held (max displacement {max_disp})", report.join(", ")))
}

// ---------------------------------------------------------------- 6

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Occurrences of `g` in `t` by scanning every offset.
fn count_occ(t: &[&str], g: &[&str]) -> usize {
    if g.len() > t.len() {
        return 0;
    }
    (0..=t.len() - g.len()).filter(|&i| &t[i..i + g.len()] == g).count()
}

fn bleu_oracle(hyps: &[String], refs: &[Vec<String>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        let h = toks(h);
        let rs: Vec<Vec<&str>> = rs.iter().map(|x| toks(x)).collect();
        c += h.len();
        let mut best = usize::MAX;
        let mut best_diff = usize::MAX;
        for x in &rs {
            let d = x.len().abs_diff(h.len());
            if d < best_diff || (d == best_diff && x.len() < best) {
                best = x.len();
                best_diff = d;
            }
        }
        r += best;
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let mut seen: Vec<&[&str]> = Vec::new();
            for i in 0..=h.len() - n {
                let g = &h[i..i + n];
                totals[n - 1] += 1;
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let in_hyp = count_occ(&h, g);
                let max_ref = rs.iter().map(|x| count_occ(x, g)).max().unwrap_or(0);
                matches[n - 1] += in_hyp.min(max_ref);
            }
        }
    }
    if c == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut logp = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        logp += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (logp / 4.0).exp()
}

/// LCS length by trying every subsequence of the shorter side.
fn lcs_brute(a: &[&str], b: &[&str]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&str> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = long.iter();
        if sub.iter().all(|w| it.any(|x| x == w)) {
            best = sub.len();
        }
    }
    best
}

fn rouge_oracle(h: &str, refs: &[String]) -> f64 {
    let h = toks(h);
    refs.iter()
        .map(|r| {
            let r = toks(r);
            let l = lcs_brute(&h, &r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
            let b2 = 1.2f64 * 1.2;
            100.0 * (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Path n-grams (k ≤ 3) by enumerating ordered tuples of distinct nodes.
fn path_grams(rec: &StructuredRecord) -> Vec<Vec<Vec<String>>> {
    let mut edges: Vec<(String, String, String)> = Vec::new();
    for t in rec.triples() {
        let e = (t.subject().to_string(), t.relation().to_string(), t.object().to_string());
        if !edges.contains(&e) {
            edges.push(e);
        }
    }
    let nodes: Vec<String> = edges
        .iter()
        .flat_map(|(s, _, o)| [s.clone(), o.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = vec![Vec::new(), Vec::new(), Vec::new()];
    for n in &nodes {
        out[0].push(vec![n.clone()]);
    }
    for (_, r, _) in &edges {
        out[0].push(vec![r.clone()]);
    }
    let labels = |a: &str, b: &str| -> Vec<String> {
        edges.iter().filter(|(s, _, o)| s == a && o == b).map(|(_, r, _)| r.clone()).collect()
    };
    for a in &nodes {
        for b in &nodes {
            if a == b {
                continue;
            }
            for r1 in labels(a, b) {
                out[1].push(vec![a.clone(), r1.clone(), b.clone()]);
                for c in &nodes {
                    if c == a || c == b {
                        continue;
                    }
                    for r2 in labels(b, c) {
                        out[2].push(vec![a.clone(), r1.clone(), b.clone(), r2, c.clone()]);
                    }
                }
            }
        }
    }
    out
}

fn sembleu_oracle(pred: &StructuredRecord, gold: &StructuredRecord) -> f64 {
    let (p, g) = (path_grams(pred), path_grams(gold));
    let mut m = [0usize; 3];
    let mut t = [0usize; 3];
    for n in 0..3 {
        t[n] = p[n].len();
        let mut seen: Vec<&Vec<String>> = Vec::new();
        for x in &p[n] {
            if seen.contains(&x) {
                continue;
            }
            seen.push(x);
            let cp = p[n].iter().filter(|y| *y == x).count();
            let cg = g[n].iter().filter(|y| *y == x).count();
            m[n] += cp.min(cg);
        }
    }
    let (c, r) = (p[0].len(), g[0].len());
    if c == 0 || m[0] == 0 {
        return 0.0;
    }
    let mut logp = (m[0] as f64 / t[0] as f64).ln();
    for n in 1..3 {
        logp += ((m[n] + 1) as f64 / (t[n] + 1) as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (logp / 3.0).exp()
}

fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran"];
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

fn random_graph_record(rng: &mut ChaCha8Rng) -> StructuredRecord {
    let nodes = ["A", "B", "C", "D"];
    let rels = ["r", "q"];
    let n = rng.random_range(1..=6);
    let ts = (0..n)
        .map(|_| {
            let s = nodes[rng.random_range(0..nodes.len())];
            let o = nodes[rng.random_range(0..nodes.len())];
            triple(s, rels[rng.random_range(0..rels.len())], o)
        })
        .collect();
    StructuredRecord::new(FormatId::Kg, ts, None).unwrap()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let s = |x: &str| x.to_string();

    // BLEU: hand cases then random corpora
    let mut bleu_cases: Vec<(Vec<String>, Vec<Vec<String>>)> = vec![
        (vec![s("the cat sat on the mat")], vec![vec![s("the cat sat on the mat")]]),
        (vec![s("the the the the")], vec![vec![s("the cat sat on the mat")]]),
        (vec![s("a b c d e")], vec![vec![s("a b c d e f g h"), s("a b c d x")]]),
        (vec![s("x y z")], vec![vec![s("p q r s")]]),
        (vec![s("a b"), s("a b c d e")], vec![vec![s("a b c")], vec![s("a b c d e")]]),
    ];
    for _ in 0..25 {
        let n = rng.random_range(1..=3);
        let hyps: Vec<String> = (0..n).map(|_| random_sentence(&mut rng, 9)).collect();
        let refs: Vec<Vec<String>> = (0..n)
            .map(|_| (0..rng.random_range(1..=3)).map(|_| random_sentence(&mut rng, 9)).collect())
            .collect();
        bleu_cases.push((hyps, refs));
    }
    for (h, r) in &bleu_cases {
        let got = metrics::bleu(h, r).map_err(|e| e.to_string())?;
        let want = bleu_oracle(h, r);
        check(close(got, want), format!("BLEU {got} vs oracle {want} on {h:?}"))?;
    }

    let mut rouge_cases: Vec<(String, Vec<String>)> = vec![
        (s("the cat sat"), vec![s("the cat sat")]),
        (s("police killed the gunman"), vec![s("police kill the gunman")]),
        (s("a b c d"), vec![s("d c b a")]),
        (s("x"), vec![s("y z")]),
        (s("a b a b"), vec![s("b a b a"), s("a a")]),
    ];
    for _ in 0..25 {
        let refs = (0..rng.random_range(1..=2)).map(|_| random_sentence(&mut rng, 8)).collect();
        rouge_cases.push((random_sentence(&mut rng, 8), refs));
    }
    for (h, r) in &rouge_cases {
        let (got, want) = (metrics::rouge_l(h, r), rouge_oracle(h, r));
        check(close(got, want), format!("ROUGE-L {got} vs oracle {want} on {h:?}"))?;
    }

    let kg = |ts: &[(&str, &str, &str)]| {
        StructuredRecord::new(FormatId::Kg, ts.iter().map(|(a, b, c)| triple(a, b, c)).collect(), None).unwrap()
    };
    let mut sem_cases = vec![
        (kg(&[("A", "r", "B"), ("B", "q", "C")]), kg(&[("A", "r", "B"), ("B", "q", "C")])),
        (kg(&[("A", "r", "B")]), kg(&[("A", "r", "B"), ("B", "q", "C")])),
        (kg(&[("A", "r", "B"), ("B", "r", "A")]), kg(&[("A", "r", "B")])),
        (kg(&[("X", "y", "Z")]), kg(&[("A", "r", "B")])),
    ];
    for _ in 0..26 {
        sem_cases.push((random_graph_record(&mut rng), random_graph_record(&mut rng)));
    }
    for (p, g) in &sem_cases {
        let (got, want) = (metrics::sembleu(p, g), sembleu_oracle(p, g));
        check(close(got, want), format!("SemBLEU {got} vs oracle {want}"))?;
    }

    // perfect system
    let gold = |i: usize| kg(&[("Nord", "artist", &format!("Band {i}")), ("Nord", "genre", "Post-metal")]);
    let outcomes: Vec<PairOutcome> = (0..5)
        .map(|i| {
            let text = format!("Nord is a Post-metal album by Band {i} .");
            PairOutcome {
                reference_text: text.clone(),
                gold: gold(i),
                d2t: text,
                d2t_identity: false,
                t2d: Some(gold(i)),
                diverse: None,
            }
        })
        .collect();
    let rep = metrics::report(&outcomes).map_err(|e| e.to_string())?;
    for (name, v) in [
        ("BLEU", rep.bleu),
        ("entity F1", rep.entity.f1),
        ("relation F1", rep.relation.f1),
        ("SemBLEU", rep.sembleu),
    ] {
        check(close(v, 100.0), format!("perfect system {name} = {v}"))?;
    }
    check(rep.format_error_pct == 0.0, "perfect system has format errors")?;
    Ok(format!(
        "BLEU {} / ROUGE-L {} / SemBLEU {} oracle cases, perfect system at 100",
        bleu_cases.len(),
        rouge_cases.len(),
        sem_cases.len()
    ))
}

// ---------------------------------------------------------------- 7–10

struct Desk {
    sources: Vec<Source>,
    vocab: Vocab,
    preset: Preset,
}

impl Desk {
    fn new() -> Desk {
        let preset = Preset::desk();
        let sources = preset.sources().unwrap();
        let vocab = build_vocab(&sources, 1).unwrap();
        Desk { sources, vocab, preset }
    }

    fn train(&self, model: ModelConfig, cfg: &TrainConfig) -> TrainOutcome {
        training::train(&self.sources, self.vocab.clone(), model, cfg, None, None).unwrap()
    }
}

struct Shared {
    desk: Option<Desk>,
    unsupervised: Option<Evaluation>,
}

impl Shared {
    fn desk(&mut self) -> &Desk {
        self.desk.get_or_insert_with(Desk::new)
    }

    /// Full-beam evaluation of the default unsupervised run.
    fn unsupervised(&mut self) -> Evaluation {
        if self.unsupervised.is_none() {
            let d = self.desk();
            let run = d.train(d.preset.model.clone(), &d.preset.train_for(&d.sources));
            let opts = EvalOptions::new(run.model.config.max_len);
            let ev = evaluate(&run.model, &run.vocab, &d.sources, &opts).unwrap();
            self.unsupervised = Some(ev);
        }
        self.unsupervised.clone().unwrap()
    }
}

const MIN_ENTITY_F1: f64 = 80.0;
const MIN_RELATION_F1: f64 = 70.0;
const MIN_BLEU: f64 = 40.0;
const MAX_FORMAT_ERROR_PCT: f64 = 5.0;
const MAX_IDENTITY_PCT: f64 = 5.0;

fn criterion_7(sh: &mut Shared) -> Outcome {
    let ev = sh.unsupervised();
    let a = &ev.aggregate;
    let d = sh.desk();
    let mut ablated_cfg = d.preset.train_for(&d.sources);
    ablated_cfg.denoising = false;
    let ablated = d.train(d.preset.model.clone(), &ablated_cfg);
    let opts = EvalOptions::new(ablated.model.config.max_len);
    let abl = evaluate(&ablated.model, &ablated.vocab, &d.sources, &opts).unwrap().aggregate;
    let ratio = if a.identity_pct > 0.0 { abl.identity_pct / a.identity_pct } else { f64::INFINITY };
    let summary = format!(
        "entity F1 {:.1}, relation F1 {:.1}, BLEU {:.1}, format errors {:.2}%, identity {:.2}% \
         (no-denoising control: identity {:.2}%, ratio {ratio:.1}, entity F1 {:.1}, BLEU {:.1})",
        a.entity.f1, a.relation.f1, a.bleu, a.format_error_pct, a.identity_pct, abl.identity_pct, abl.entity.f1, abl.bleu
    );
    check(a.entity.f1 >= MIN_ENTITY_F1, format!("entity F1 below {MIN_ENTITY_F1}: {summary}"))?;
    check(a.relation.f1 >= MIN_RELATION_F1, format!("relation F1 below {MIN_RELATION_F1}: {summary}"))?;
    check(a.bleu >= MIN_BLEU, format!("BLEU below {MIN_BLEU}: {summary}"))?;
    check(a.format_error_pct <= MAX_FORMAT_ERROR_PCT, format!("format errors: {summary}"))?;
    check(a.identity_pct < MAX_IDENTITY_PCT, format!("identity collapse: {summary}"))?;
    Ok(summary)
}

fn macro_entity_f1(ev: &Evaluation) -> f64 {
    ev.sources.iter().map(|s| s.report.entity.f1).sum::<f64>() / ev.sources.len() as f64
}

fn criterion_8() -> Outcome {
    let p = Preset::small();
    let sources = p.sources().unwrap();
    let vocab = build_vocab(&sources, 1).unwrap();
    let opts = EvalOptions::fast(p.model.max_len);
    let mut diffs = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = p.train_for(&sources);
        cfg.seed = seed;
        let pooled = training::train(&sources, vocab.clone(), p.model.clone(), &cfg, None, None).unwrap();
        let pooled_f1 = macro_entity_f1(&evaluate(&pooled.model, &pooled.vocab, &sources, &opts).unwrap());
        let mut single = Vec::new();
        for s in &sources {
            let one = std::slice::from_ref(s);
            let mut cfg = p.train_for(one);
            cfg.seed = seed;
            let run = training::train(one, vocab.clone(), p.model.clone(), &cfg, None, None).unwrap();
            single.push(evaluate(&run.model, &run.vocab, one, &opts).unwrap().sources.remove(0));
        }
        let single_f1 = single.iter().map(|s| s.report.entity.f1).sum::<f64>() / single.len() as f64;
        diffs.push(pooled_f1 - single_f1);
        lines.push(format!("seed {seed}: {pooled_f1:.1} vs {single_f1:.1}"));
    }
    let d = MeanCi::of(&diffs);
    let summary = format!(
        "pooled minus single-source entity F1 {:.1} ± {:.1} ({})",
        d.mean,
        d.ci95,
        lines.join("; ")
    );
    check(d.mean >= 0.0, summary.clone())?;
    Ok(summary)
}

fn criterion_9(sh: &mut Shared) -> Outcome {
    let unsup = sh.unsupervised().aggregate.entity.f1;
    let d = sh.desk();
    let cfg = d.preset.train_for(&d.sources);
    let sup = training::train_supervised(&d.sources, d.vocab.clone(), d.preset.model.clone(), &cfg, None, None).unwrap();
    let opts = EvalOptions::new(sup.model.config.max_len);
    let sup_f1 = evaluate(&sup.model, &sup.vocab, &d.sources, &opts).unwrap().aggregate.entity.f1;
    let summary = format!("supervised entity F1 {sup_f1:.1} vs unsupervised {unsup:.1}");
    check(sup_f1 >= unsup - 2.0, summary.clone())?;
    Ok(summary)
}

fn criterion_10(sh: &mut Shared) -> Outcome {
    let d = sh.desk();
    let mut stats = Vec::new();
    for d_style in [2usize, 8, 32] {
        let model = ModelConfig {
            d_style,
            ..d.preset.model.clone()
        };
        let run = d.train(model, &d.preset.train_for(&d.sources));
        let mut opts = EvalOptions::fast(run.model.config.max_len);
        opts.max_pairs = Some(10);
        opts.diversity_k = Some(10);
        opts.diversity_seeds = (0..10).collect();
        let div = evaluate(&run.model, &run.vocab, &d.sources, &opts).unwrap().diversity.unwrap();
        stats.push((d_style, div));
    }
    let line = stats
        .iter()
        .map(|(d, v)| {
            format!(
                "d={d}: self-BLEU {:.2}±{:.2} distinct-2 {:.4}±{:.4}",
                v.self_bleu.mean, v.self_bleu.ci95, v.distinct2.mean, v.distinct2.ci95
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let (lo, hi) = (&stats[0].1, &stats[2].1);
    check(hi.self_bleu.mean < lo.self_bleu.mean, format!("self-BLEU did not fall: {line}"))?;
    check(hi.distinct2.mean > lo.distinct2.mean, format!("distinct-2 did not rise: {line}"))?;
    Ok(line)
}

// ---------------------------------------------------------------- 11, 12

fn criterion_11() -> Outcome {
    let mut worst: f64 = 0.0;
    for d in 1..=64usize {
        let want = d as f64 / 2.0 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        let got = style_entropy_bound(d).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("d = 1..64, max deviation {worst:.1e}"))
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn criterion_12() -> Outcome {
    let mut world = WorldConfig::default();
    for s in &mut world.sources {
        s.n_texts = 16;
        s.n_records = 16;
        s.n_eval = 4;
    }
    let model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: Some(3),
        batch_size: 4,
        warmup_steps: 2,
        seed: 12,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for i in 0..2 {
        let sources = cyclegen::corpus::generate_synthetic_world(12, &world).unwrap();
        let vocab = build_vocab(&sources, 1).unwrap();
        let dir = tmp.path().join(format!("run{i}"));
        let run = training::train(&sources, vocab, model.clone(), &cfg, Some(&dir), None).unwrap();
        let mut opts = EvalOptions::new(run.model.config.max_len);
        opts.diversity_k = Some(3);
        opts.diversity_seeds = vec![0, 1];
        let ev = evaluate(&run.model, &run.vocab, &sources, &opts).unwrap();
        let report = format!("{}{}", serde_json::to_string(&ev).unwrap(), ev.to_csv());
        runs.push((tree_bytes(&dir), report));
    }
    check(runs[0].0 == runs[1].0, "run directories differ")?;
    check(runs[0].1 == runs[1].1, "reports differ")?;
    Ok(format!("{} run files and the report identical across two runs", runs[0].0.len()))
}

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut shared = Shared {
        desk: None,
        unsupervised: None,
    };
    let titles: HashMap<u32, &str> = [
        (1, "format fidelity"),
        (2, "round-trip and conversion"),
        (3, "gradient check"),
        (4, "MMD correctness"),
        (5, "noise statistics"),
        (6, "metric oracles"),
        (7, "end-to-end unsupervised run"),
        (8, "multi-source benefit"),
        (9, "supervised upper bound"),
        (10, "diversity trend"),
        (11, "entropy bound"),
        (12, "determinism"),
    ]
    .into_iter()
    .collect();
    let mut failed = Vec::new();
    for n in 1..=12u32 {
        if !wanted(n) {
            continue;
        }
        let t0 = Instant::now();
        let result = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(&mut shared),
            8 => criterion_8(),
            9 => criterion_9(&mut shared),
            10 => criterion_10(&mut shared),
            11 => criterion_11(),
            _ => criterion_12(),
        };
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(n);
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} [{}] {detail} ({secs:.1} s)", titles[&n]);
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
