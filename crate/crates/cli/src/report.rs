//! Plain-text summary tables for stdout.

use std::path::Path;

use serde_json::Value;

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) if n.is_f64() => format!("{:.4}", n.as_f64().unwrap_or(f64::NAN)),
        Value::Array(a) if a.iter().all(Value::is_number) => {
            format!("[{}]", a.iter().map(cell).collect::<Vec<_>>().join(", "))
        }
        other => other.to_string(),
    }
}

pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out += &line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for r in rows {
        out += &line(r);
    }
    out
}

/// Key/value table of the scalar fields, then one table per array of objects.
pub fn render_summary(stage: &str, dir: &Path, summary: &Value) -> String {
    let mut out = format!("{stage}: {}\n", dir.display());
    let Some(map) = summary.as_object() else {
        return out + &cell(summary) + "\n";
    };
    let mut kv = Vec::new();
    let mut tables = Vec::new();
    for (k, v) in map {
        match v {
            Value::Array(rows) if rows.first().is_some_and(Value::is_object) => tables.push((k, rows)),
            Value::Object(inner) => kv.extend(inner.iter().map(|(ik, iv)| vec![format!("{k}.{ik}"), cell(iv)])),
            _ => kv.push(vec![k.clone(), cell(v)]),
        }
    }
    out += &render_table(&["field".into(), "value".into()], &kv);
    for (name, rows) in tables {
        let header: Vec<String> = rows[0].as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default();
        let body: Vec<Vec<String>> = rows.iter().map(|r| header.iter().map(|h| cell(&r[h])).collect()).collect();
        out += &format!("\n{name}\n");
        out += &render_table(&header, &body);
    }
    out
}

pub fn print_summary(stage: &str, dir: &Path, summary: &Value) {
    print!("{}", render_summary(stage, dir, summary));
}
