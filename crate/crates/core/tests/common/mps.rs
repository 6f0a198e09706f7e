//! Independent fixed-format MPS reader used as a round-trip oracle.

use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
pub struct MpsColumn {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub integer: bool,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpsRow {
    pub name: String,
    /// 'L', 'G' or 'E'.
    pub sense: char,
    pub rhs: f64,
    pub terms: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MpsProblem {
    pub columns: Vec<MpsColumn>,
    pub rows: Vec<MpsRow>,
    pub objective_offset: f64,
    /// Comment lines mapping column names to variable keys.
    pub keys: HashMap<String, String>,
}

impl MpsProblem {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

pub fn parse_mps(text: &str) -> Result<MpsProblem, String> {
    let mut p = MpsProblem::default();
    let mut section = "";
    let mut objective_row = String::new();
    let mut row_index: HashMap<String, usize> = HashMap::new();
    let mut col_index: HashMap<String, usize> = HashMap::new();
    let mut integer = false;

    for (lineno, line) in text.lines().enumerate() {
        let err = |msg: &str| format!("line {}: {msg}: {line:?}", lineno + 1);
        if let Some(comment) = line.strip_prefix('*') {
            let mut it = comment.split_whitespace();
            if let (Some(name), Some(key), None) = (it.next(), it.next(), it.next()) {
                if name.starts_with('C') && name.len() == 8 {
                    p.keys.insert(name.to_string(), key.to_string());
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !line.starts_with(' ') {
            section = line.split_whitespace().next().unwrap_or("");
            if !matches!(section, "NAME" | "ROWS" | "COLUMNS" | "RHS" | "BOUNDS" | "RANGES" | "ENDATA") {
                return Err(err("unknown section"));
            }
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        match section {
            "ROWS" => {
                let [sense, name] = f[..] else { return Err(err("bad row")) };
                if sense == "N" {
                    objective_row = name.to_string();
                } else {
                    let sense = match sense {
                        "L" => 'L',
                        "G" => 'G',
                        "E" => 'E',
                        _ => return Err(err("bad sense")),
                    };
                    row_index.insert(name.to_string(), p.rows.len());
                    p.rows.push(MpsRow {
                        name: name.to_string(),
                        sense,
                        rhs: 0.0,
                        terms: Vec::new(),
                    });
                }
            }
            "COLUMNS" => {
                if f.len() == 3 && f[1] == "'MARKER'" {
                    integer = match f[2] {
                        "'INTORG'" => true,
                        "'INTEND'" => false,
                        _ => return Err(err("bad marker")),
                    };
                    continue;
                }
                if f.len() != 3 && f.len() != 5 {
                    return Err(err("bad column entry"));
                }
                let j = *col_index.entry(f[0].to_string()).or_insert_with(|| {
                    p.columns.push(MpsColumn {
                        name: f[0].to_string(),
                        lower: 0.0,
                        upper: f64::INFINITY,
                        integer,
                        cost: 0.0,
                    });
                    p.columns.len() - 1
                });
                for pair in f[1..].chunks(2) {
                    let v: f64 = pair[1].parse().map_err(|_| err("bad number"))?;
                    if pair[0] == objective_row {
                        p.columns[j].cost += v;
                    } else {
                        let &i = row_index.get(pair[0]).ok_or_else(|| err("unknown row"))?;
                        p.rows[i].terms.push((j, v));
                    }
                }
            }
            "RHS" => {
                if f.len() != 3 && f.len() != 5 {
                    return Err(err("bad rhs entry"));
                }
                for pair in f[1..].chunks(2) {
                    let v: f64 = pair[1].parse().map_err(|_| err("bad number"))?;
                    if pair[0] == objective_row {
                        p.objective_offset = -v;
                    } else {
                        let &i = row_index.get(pair[0]).ok_or_else(|| err("unknown row"))?;
                        p.rows[i].rhs = v;
                    }
                }
            }
            "BOUNDS" => {
                if f.len() < 3 {
                    return Err(err("bad bound"));
                }
                let &j = col_index.get(f[2]).ok_or_else(|| err("unknown column"))?;
                let value = || -> Result<f64, String> {
                    f.get(3).ok_or_else(|| err("missing value"))?.parse().map_err(|_| err("bad number"))
                };
                let c = &mut p.columns[j];
                match f[0] {
                    "LO" => c.lower = value()?,
                    "UP" => c.upper = value()?,
                    "FX" => {
                        c.lower = value()?;
                        c.upper = c.lower;
                    }
                    "FR" => {
                        c.lower = f64::NEG_INFINITY;
                        c.upper = f64::INFINITY;
                    }
                    "MI" => c.lower = f64::NEG_INFINITY,
                    "PL" => c.upper = f64::INFINITY,
                    "BV" => {
                        c.lower = 0.0;
                        c.upper = 1.0;
                        c.integer = true;
                    }
                    _ => return Err(err("bad bound kind")),
                }
            }
            "NAME" | "ENDATA" => {}
            _ => return Err(err("data outside a section")),
        }
    }
    if section != "ENDATA" {
        return Err("missing ENDATA".into());
    }
    Ok(p)
}
