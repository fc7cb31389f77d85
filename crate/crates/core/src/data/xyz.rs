use std::collections::BTreeMap;

use super::{atomic_number, element_symbol, DataError, Point, Structure};

const PAIR_COLUMN: &str = "relaxed_pos";

#[derive(Debug, Clone, Copy, PartialEq)]
enum Column {
    Species,
    Pos,
    Pair,
    Skip(usize),
}

fn parse_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        line,
        message: message.into(),
    }
}

/// Splits a comment line into `key=value` pairs. Values may be double-quoted.
fn comment_pairs(comment: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut chars = comment.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.peek() != Some(&'=') {
            // bare word, not a key=value pair
            continue;
        }
        chars.next();
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            for c in chars.by_ref() {
                if c == '"' {
                    break;
                }
                value.push(c);
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        out.push((key, value));
    }
    out
}

fn parse_properties(spec: &str, line: usize) -> Result<Vec<Column>, DataError> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() % 3 != 0 {
        return Err(parse_err(line, format!("malformed Properties '{spec}'")));
    }
    let mut cols = Vec::new();
    for chunk in parts.chunks(3) {
        let width: usize = chunk[2]
            .parse()
            .map_err(|_| parse_err(line, format!("bad column width in '{spec}'")))?;
        let col = match (chunk[0], chunk[1], width) {
            ("species", "S", 1) => Column::Species,
            ("pos", "R", 3) => Column::Pos,
            (PAIR_COLUMN, "R", 3) => Column::Pair,
            _ => Column::Skip(width),
        };
        cols.push(col);
    }
    if !cols.contains(&Column::Species) || !cols.contains(&Column::Pos) {
        return Err(parse_err(line, "Properties must declare species:S:1 and pos:R:3"));
    }
    Ok(cols)
}

fn parse_element(token: &str, line: usize) -> Result<u8, DataError> {
    if let Some(z) = atomic_number(token) {
        return Ok(z);
    }
    match token.parse::<u8>() {
        Ok(z) if (1..=118).contains(&z) => Ok(z),
        _ => Err(parse_err(line, format!("unknown element '{token}'"))),
    }
}

fn parse_coord(token: &str, line: usize) -> Result<f64, DataError> {
    token
        .parse::<f64>()
        .map_err(|_| parse_err(line, format!("non-numeric coordinate '{token}'")))
}

/// Parses standard or extended XYZ text (LF or CRLF) into one structure per
/// frame. Numeric `key=value` pairs on the comment line become labels.
pub fn parse_xyz(text: &str) -> Result<Vec<Structure>, DataError> {
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let count: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| parse_err(count_line, format!("expected atom count, got '{}'", lines[i].trim())))?;
        if count == 0 {
            return Err(parse_err(count_line, "atom count must be at least 1"));
        }
        let comment = lines
            .get(i + 1)
            .ok_or_else(|| parse_err(count_line + 1, "missing comment line"))?;
        let mut columns = vec![Column::Species, Column::Pos];
        let mut labels = BTreeMap::new();
        for (key, value) in comment_pairs(comment) {
            if key.eq_ignore_ascii_case("properties") {
                columns = parse_properties(&value, count_line + 1)?;
            } else if let Ok(v) = value.parse::<f64>() {
                labels.insert(key, v);
            }
        }
        let width: usize = columns
            .iter()
            .map(|c| match c {
                Column::Species => 1,
                Column::Pos | Column::Pair => 3,
                Column::Skip(w) => *w,
            })
            .sum();
        let has_pair = columns.contains(&Column::Pair);
        let mut numbers = Vec::with_capacity(count);
        let mut positions: Vec<Point> = Vec::with_capacity(count);
        let mut pair: Vec<Point> = Vec::new();
        for a in 0..count {
            let line_no = i + 3 + a;
            let row = lines.get(i + 2 + a).ok_or_else(|| {
                parse_err(line_no, format!("atom count {count} but only {a} atom rows"))
            })?;
            let tokens: Vec<&str> = row.split_whitespace().collect();
            if tokens.len() != width {
                return Err(parse_err(
                    line_no,
                    format!("expected {width} columns, found {}", tokens.len()),
                ));
            }
            let mut t = 0;
            for col in &columns {
                match col {
                    Column::Species => {
                        numbers.push(parse_element(tokens[t], line_no)?);
                        t += 1;
                    }
                    Column::Pos | Column::Pair => {
                        let p = [
                            parse_coord(tokens[t], line_no)?,
                            parse_coord(tokens[t + 1], line_no)?,
                            parse_coord(tokens[t + 2], line_no)?,
                        ];
                        if *col == Column::Pos {
                            positions.push(p);
                        } else {
                            pair.push(p);
                        }
                        t += 3;
                    }
                    Column::Skip(w) => t += w,
                }
            }
        }
        let s = Structure::with_details(numbers, positions, labels, has_pair.then_some(pair))
            .map_err(|e| parse_err(count_line, e.to_string()))?;
        frames.push(s);
        i += 2 + count;
    }
    Ok(frames)
}

fn fmt(v: f64) -> String {
    // 17 significant digits round-trip every finite f64
    format!("{v:.16e}")
}

/// Writes extended XYZ. Labels go on the comment line; a paired frame is
/// written as an extra `relaxed_pos:R:3` column.
pub fn write_xyz(structures: &[Structure]) -> String {
    let mut out = String::new();
    for s in structures {
        out.push_str(&format!("{}\n", s.len()));
        let mut comment = String::from("Properties=species:S:1:pos:R:3");
        if s.pair_positions().is_some() {
            comment.push_str(&format!(":{PAIR_COLUMN}:R:3"));
        }
        for (k, v) in s.labels() {
            comment.push_str(&format!(" {k}={}", fmt(*v)));
        }
        out.push_str(&comment);
        out.push('\n');
        for (a, (&z, p)) in s.atomic_numbers().iter().zip(s.positions()).enumerate() {
            let sym = element_symbol(z).unwrap_or("X");
            out.push_str(&format!("{sym} {} {} {}", fmt(p[0]), fmt(p[1]), fmt(p[2])));
            if let Some(pair) = s.pair_positions() {
                let q = pair[a];
                out.push_str(&format!(" {} {} {}", fmt(q[0]), fmt(q[1]), fmt(q[2])));
            }
            out.push('\n');
        }
    }
    out
}
