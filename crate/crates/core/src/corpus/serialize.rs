use std::fmt::Write as _;

use super::vocab::Vocab;
use super::world::{AttackType, Label, LabeledPair, Template, World, WorldSizes};
use crate::error::{JpuError, Result};

fn parse_err(line: usize, msg: impl Into<String>) -> JpuError {
    JpuError::Parse { line, msg: msg.into() }
}

/// Space-separated token ids; the empty sequence is the empty string.
pub fn write_tokens(tokens: &[usize]) -> String {
    let mut s = String::with_capacity(tokens.len() * 3);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{t}").expect("writing to a String");
    }
    s
}

pub fn parse_tokens(field: &str) -> std::result::Result<Vec<usize>, String> {
    field.split(' ').filter(|s| !s.is_empty()).map(|s| s.parse::<usize>().map_err(|_| format!("bad token id {s:?}"))).collect()
}

const PAIR_SETS: [&str; 4] = ["forget", "retain", "retain_holdout", "benign"];

/// Line-delimited, tab-separated world dump. The first line records the
/// seed and set sizes.
pub fn world_to_tsv(world: &World) -> String {
    let mut out = String::new();
    write!(out, "#world\tseed={}\tvocab={}", world.seed, world.vocab.size).unwrap();
    for (k, n) in world.sizes.fields() {
        write!(out, "\t{k}={n}").unwrap();
    }
    out.push('\n');
    let sets = [&world.forget, &world.retain, &world.retain_holdout, &world.benign];
    for (name, set) in PAIR_SETS.iter().zip(sets) {
        for p in set {
            writeln!(out, "pair\t{name}\t{}\t{}\t{}", write_tokens(&p.prompt), write_tokens(&p.response), p.label.name()).unwrap();
        }
    }
    for (pool, ts) in [("pool", &world.templates), ("eval", &world.eval_templates)] {
        for t in ts {
            writeln!(out, "template\t{pool}\t{}\t{}\t{}\t{}", t.id, t.attack_type.name(), write_tokens(&t.prefix), write_tokens(&t.suffix))
                .unwrap();
        }
    }
    for q in &world.eval_queries {
        writeln!(out, "query\teval\t{}", write_tokens(q)).unwrap();
    }
    out
}

pub fn world_from_tsv(text: &str) -> Result<World> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty world file"))?;
    let mut fields = header.split('\t');
    if fields.next() != Some("#world") {
        return Err(parse_err(1, "missing #world header"));
    }
    let mut seed = None;
    let mut sizes = WorldSizes::default();
    let mut vocab = Vocab::default();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| parse_err(1, format!("bad header field {f:?}")))?;
        match k {
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| parse_err(1, "bad seed"))?),
            "vocab" => {
                let n = v.parse().map_err(|_| parse_err(1, "bad vocab size"))?;
                vocab = Vocab::for_size(n)?;
            }
            _ => sizes.set(k, v).map_err(|e| parse_err(1, e.to_string()))?,
        }
    }
    let seed = seed.ok_or_else(|| parse_err(1, "header lacks seed"))?;

    let mut world = World {
        seed,
        sizes,
        vocab,
        forget: Vec::new(),
        retain: Vec::new(),
        retain_holdout: Vec::new(),
        benign: Vec::new(),
        templates: Vec::new(),
        eval_templates: Vec::new(),
        eval_queries: Vec::new(),
    };
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let toks = |s: &str| parse_tokens(s).map_err(|m| parse_err(ln, m));
        match (cols[0], cols.len()) {
            ("pair", 5) => {
                let prompt = toks(cols[2])?;
                if prompt.is_empty() {
                    return Err(parse_err(ln, "empty prompt"));
                }
                let pair = LabeledPair {
                    prompt,
                    response: toks(cols[3])?,
                    label: Label::parse(cols[4]).map_err(|e| parse_err(ln, e.to_string()))?,
                };
                let set = match cols[1] {
                    "forget" => &mut world.forget,
                    "retain" => &mut world.retain,
                    "retain_holdout" => &mut world.retain_holdout,
                    "benign" => &mut world.benign,
                    other => return Err(parse_err(ln, format!("unknown pair set {other:?}"))),
                };
                set.push(pair);
            }
            ("template", 6) => {
                let id = cols[2].parse().map_err(|_| parse_err(ln, "bad template id"))?;
                let kind = AttackType::parse(cols[3]).map_err(|e| parse_err(ln, e.to_string()))?;
                let t = Template::new(id, toks(cols[4])?, toks(cols[5])?, kind).map_err(|e| parse_err(ln, e.to_string()))?;
                match cols[1] {
                    "pool" => world.templates.push(t),
                    "eval" => world.eval_templates.push(t),
                    other => return Err(parse_err(ln, format!("unknown template pool {other:?}"))),
                }
            }
            ("query", 3) => world.eval_queries.push(toks(cols[2])?),
            (kind, n) => return Err(parse_err(ln, format!("unexpected record {kind:?} with {n} fields"))),
        }
    }
    Ok(world)
}
