use std::fmt::Write as _;

use super::mutate::{MutationKind, MutationRecord};
use super::{Buffer, BufferEntry};
use crate::corpus::{parse_tokens, write_tokens, AttackType, Template};
use crate::error::{JpuError, Result};

fn parse_err(line: usize, msg: impl Into<String>) -> JpuError {
    JpuError::Parse { line, msg: msg.into() }
}

fn write_history(h: &[MutationRecord]) -> String {
    let mut s = String::new();
    for r in h {
        write!(s, "{r};").unwrap();
    }
    s
}

fn parse_history(field: &str) -> std::result::Result<Vec<MutationRecord>, String> {
    field
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|rec| {
            let parts: Vec<&str> = rec.split(':').collect();
            if parts.len() != 4 {
                return Err(format!("bad mutation record {rec:?}"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| format!("bad number in {rec:?}"));
            Ok(MutationRecord {
                kind: MutationKind::parse(parts[0]).map_err(|e| e.to_string())?,
                position: num(parts[1])? as usize,
                token: num(parts[2])? as usize,
                iteration: num(parts[3])?,
            })
        })
        .collect()
}

fn opt_f64(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:?}"))
}

fn parse_opt_f64(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "-" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad number {s:?}"))
    }
}

/// Line-delimited, tab-separated buffer dump; mutation histories are
/// `kind:pos:token:iter;` records.
pub fn buffer_to_tsv(buffer: &Buffer) -> String {
    let mut out = format!("#buffer\tinitial={}\tcap={}\tmax_prompt_len={}\n", buffer.initial_size, buffer.cap, buffer.max_prompt_len);
    for e in &buffer.entries {
        let flags = match (e.truncated, e.unmutated) {
            (false, false) => "-",
            (true, false) => "truncated",
            (false, true) => "unmutated",
            (true, true) => "truncated,unmutated",
        };
        writeln!(
            out,
            "entry\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.template.id,
            e.template.attack_type.name(),
            write_tokens(&e.template.prefix),
            write_tokens(&e.template.suffix),
            write_tokens(&e.query),
            write_tokens(&e.jailbreak_prompt),
            write_history(&e.history),
            opt_f64(e.last_refusal_loss),
            flags,
            opt_f64(e.pending_parent_loss),
            e.cooldown
        )
        .unwrap();
    }
    out
}

pub fn buffer_from_tsv(text: &str) -> Result<Buffer> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty buffer file"))?;
    let mut fields = header.split('\t');
    if fields.next() != Some("#buffer") {
        return Err(parse_err(1, "missing #buffer header"));
    }
    let (mut initial, mut cap, mut max_len) = (None, None, None);
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| parse_err(1, format!("bad header field {f:?}")))?;
        let n: usize = v.parse().map_err(|_| parse_err(1, format!("bad value for {k}")))?;
        match k {
            "initial" => initial = Some(n),
            "cap" => cap = Some(n),
            "max_prompt_len" => max_len = Some(n),
            _ => return Err(parse_err(1, format!("unknown header key {k:?}"))),
        }
    }
    let missing = |k: &str| parse_err(1, format!("header lacks {k}"));
    let mut buffer = Buffer {
        entries: Vec::new(),
        initial_size: initial.ok_or_else(|| missing("initial"))?,
        cap: cap.ok_or_else(|| missing("cap"))?,
        max_prompt_len: max_len.ok_or_else(|| missing("max_prompt_len"))?,
    };
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 12 || c[0] != "entry" {
            return Err(parse_err(ln, "expected an entry record with 12 fields"));
        }
        let wrap = |m: String| parse_err(ln, m);
        let template = Template::new(
            c[1].parse().map_err(|_| parse_err(ln, "bad template id"))?,
            parse_tokens(c[3]).map_err(wrap)?,
            parse_tokens(c[4]).map_err(wrap)?,
            AttackType::parse(c[2]).map_err(|e| parse_err(ln, e.to_string()))?,
        )
        .map_err(|e| parse_err(ln, e.to_string()))?;
        let flags: Vec<&str> = c[9].split(',').collect();
        buffer.entries.push(BufferEntry {
            template,
            query: parse_tokens(c[5]).map_err(wrap)?,
            jailbreak_prompt: parse_tokens(c[6]).map_err(wrap)?,
            history: parse_history(c[7]).map_err(wrap)?,
            last_refusal_loss: parse_opt_f64(c[8]).map_err(wrap)?,
            truncated: flags.contains(&"truncated"),
            unmutated: flags.contains(&"unmutated"),
            pending_parent_loss: parse_opt_f64(c[10]).map_err(wrap)?,
            cooldown: c[11].parse().map_err(|_| parse_err(ln, "bad cooldown"))?,
        });
    }
    Ok(buffer)
}
