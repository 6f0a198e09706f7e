//! Fixed-format MPS writer.
//!
//! Columns follow the sorted order of their structured keys and get short
//! generated names (`C0000001`, rows `R0000001`); the key behind every name is
//! listed in leading `*` comment lines. Numbers use the shortest decimal that
//! round-trips, so the output is byte-identical for identical models.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MilpModel, Sense, VarKind};

fn column_name(position: usize) -> String {
    format!("C{:07}", position + 1)
}

fn row_name(i: usize) -> String {
    format!("R{:07}", i + 1)
}

fn num(v: f64) -> String {
    // `-0` and `0` must print the same
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

fn entry(out: &mut impl Write, col: &str, row: &str, value: f64) -> io::Result<()> {
    writeln!(out, "    {col:<8}  {row:<8}  {:>12}", num(value))
}

fn bound(out: &mut impl Write, kind: &str, col: &str, value: Option<f64>) -> io::Result<()> {
    match value {
        Some(v) => writeln!(out, " {kind:<2} BND       {col:<8}  {:>12}", num(v)),
        None => writeln!(out, " {kind:<2} BND       {col}"),
    }
}

/// Writes `model` in fixed MPS format.
pub fn write_mps(model: &MilpModel, out: &mut impl Write) -> io::Result<()> {
    let order = model.key_order();
    let mut name_of = vec![String::new(); model.num_vars()];
    for (pos, &j) in order.iter().enumerate() {
        name_of[j] = column_name(pos);
    }

    writeln!(out, "* bdnn training model")?;
    writeln!(
        out,
        "* {} columns, {} rows, {} integer",
        model.num_vars(),
        model.num_constraints(),
        model.num_integer()
    )?;
    for &j in &order {
        writeln!(out, "* {} {}", name_of[j], model.variables[j].key)?;
    }
    for cone in &model.cones {
        let members: Vec<String> = cone
            .members
            .iter()
            .map(|terms| {
                terms
                    .iter()
                    .map(|&(j, c)| format!("{}*{}", num(c), name_of[j]))
                    .collect::<Vec<_>>()
                    .join(" + ")
            })
            .collect();
        writeln!(
            out,
            "* cone: norm2({}) <= {} (not expressed in the rows below)",
            members.join(", "),
            name_of[cone.bound]
        )?;
    }
    if model.objective_offset != 0.0 {
        writeln!(out, "* objective constant {}", num(model.objective_offset))?;
    }

    writeln!(out, "NAME          BDNN")?;
    writeln!(out, "ROWS")?;
    writeln!(out, " N  OBJ")?;
    for (i, c) in model.constraints.iter().enumerate() {
        let sense = match c.sense {
            Sense::Le => "L",
            Sense::Ge => "G",
            Sense::Eq => "E",
        };
        writeln!(out, " {sense}  {}", row_name(i))?;
    }

    let mut column_entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); model.num_vars()];
    for (i, c) in model.constraints.iter().enumerate() {
        for &(j, a) in &c.terms {
            column_entries[j].push((i, a));
        }
    }
    let mut objective = vec![0.0; model.num_vars()];
    for &(j, c) in &model.objective {
        objective[j] += c;
    }

    writeln!(out, "COLUMNS")?;
    let mut in_integer_block = false;
    let mut markers = 0usize;
    for &j in &order {
        let integer = model.variables[j].is_integer();
        if integer != in_integer_block {
            let tag = if integer { "'INTORG'" } else { "'INTEND'" };
            writeln!(out, "    MARKER{markers:<4}            'MARKER'                 {tag}")?;
            markers += usize::from(!integer);
            in_integer_block = integer;
        }
        let name = &name_of[j];
        if objective[j] != 0.0 {
            entry(out, name, "OBJ", objective[j])?;
        }
        for &(i, a) in &column_entries[j] {
            entry(out, name, &row_name(i), a)?;
        }
        if objective[j] == 0.0 && column_entries[j].is_empty() {
            // keep the column declared
            entry(out, name, "OBJ", 0.0)?;
        }
    }
    if in_integer_block {
        writeln!(out, "    MARKER{markers:<4}            'MARKER'                 'INTEND'")?;
    }

    writeln!(out, "RHS")?;
    if model.objective_offset != 0.0 {
        entry(out, "RHS", "OBJ", -model.objective_offset)?;
    }
    for (i, c) in model.constraints.iter().enumerate() {
        if c.rhs != 0.0 {
            entry(out, "RHS", &row_name(i), c.rhs)?;
        }
    }

    writeln!(out, "BOUNDS")?;
    for &j in &order {
        let v = &model.variables[j];
        let name = &name_of[j];
        let (l, u) = (v.lower, v.upper);
        if v.kind == VarKind::Binary && l == 0.0 && u == 1.0 {
            bound(out, "BV", name, None)?;
        } else if l == u {
            bound(out, "FX", name, Some(l))?;
        } else if l == f64::NEG_INFINITY && u == f64::INFINITY {
            bound(out, "FR", name, None)?;
        } else {
            if l == f64::NEG_INFINITY {
                bound(out, "MI", name, None)?;
            } else if l != 0.0 || v.is_integer() {
                bound(out, "LO", name, Some(l))?;
            }
            if u.is_finite() {
                bound(out, "UP", name, Some(u))?;
            } else if v.is_integer() {
                bound(out, "PL", name, None)?;
            }
        }
    }
    writeln!(out, "ENDATA")
}

/// Writes `model` to `path` in fixed MPS format.
pub fn export_mps(model: &MilpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    model.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_mps(model, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinExpr, VarKey};

    fn small() -> MilpModel {
        let mut m = MilpModel::new();
        let w = m.add_continuous(VarKey::Weight { layer: 0, row: 0, col: 0 }, -1.0, 1.0);
        let u = m.add_binary(VarKey::Activation { unit: 0, layer: 0, neuron: 0 });
        let t = m.add_continuous(VarKey::Threshold { layer: 0 }, -1.0, 1.0);
        let mut e = LinExpr::new();
        e.add(w, 0.5).add(u, -3.0).add(t, -1.0);
        m.add_constraint(&e, Sense::Le, -1e-4);
        let mut o = LinExpr::new();
        o.add(u, -1.0);
        m.add_objective(&o);
        m
    }

    fn render(m: &MilpModel) -> String {
        let mut buf = Vec::new();
        write_mps(m, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn layout() {
        let text = render(&small());
        let expected = "\
* bdnn training model
* 3 columns, 1 rows, 1 integer
* C0000001 W[0][0][0]
* C0000002 lambda[0]
* C0000003 u[0][0][0]
NAME          BDNN
ROWS
 N  OBJ
 L  R0000001
COLUMNS
    C0000001  R0000001           0.5
    C0000002  R0000001            -1
    MARKER0               'MARKER'                 'INTORG'
    C0000003  OBJ                 -1
    C0000003  R0000001            -3
    MARKER0               'MARKER'                 'INTEND'
RHS
    RHS       R0000001       -0.0001
BOUNDS
 LO BND       C0000001            -1
 UP BND       C0000001             1
 LO BND       C0000002            -1
 UP BND       C0000002             1
 BV BND       C0000003
ENDATA
";
        assert_eq!(text, expected);
    }

    #[test]
    fn deterministic() {
        assert_eq!(render(&small()), render(&small()));
    }

    #[test]
    fn export_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mps");
        export_mps(&small(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), render(&small()));
        assert!(export_mps(&small(), dir.path().join("missing/m.mps")).is_err());
    }
}
