use std::collections::BTreeMap;

use super::{ActionResult, ActionSpec, TableLookup};

/// An in-memory CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(raw: &str) -> Result<Self, csv::Error> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(raw.as_bytes());
        let headers = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Finds the first row whose `column` equals `key`, ignoring case.
    pub fn find(&self, column: usize, key: &str) -> Option<&[String]> {
        let key = key.trim();
        self.rows
            .iter()
            .find(|row| row.get(column).is_some_and(|v| v.eq_ignore_ascii_case(key)))
            .map(Vec::as_slice)
    }

    pub(crate) fn check_template(&self, template: &str) -> Result<(), String> {
        for name in placeholders(template) {
            if self.column(name).is_none() {
                return Err(format!("row template refers to unknown column {name:?}"));
            }
        }
        Ok(())
    }

    pub fn render_row(&self, row: &[String], template: Option<&str>) -> String {
        match template {
            Some(t) => {
                let mut out = t.to_string();
                for (h, v) in self.headers.iter().zip(row) {
                    out = out.replace(&format!("{{{h}}}"), v);
                }
                out
            }
            None => self
                .headers
                .iter()
                .zip(row)
                .map(|(h, v)| format!("{h}: {v}"))
                .collect::<Vec<_>>()
                .join("; "),
        }
    }
}

fn placeholders(template: &str) -> impl Iterator<Item = &str> {
    template.split('{').skip(1).filter_map(|part| part.split_once('}').map(|(name, _)| name))
}

pub(super) fn lookup(spec: &ActionSpec, cfg: &TableLookup, table: &Table, args: &BTreeMap<String, String>) -> ActionResult {
    let template = cfg.row_template.as_deref();
    match &cfg.key_column {
        Some(key_column) => {
            let Some(key) = args.get(key_column).map(|k| k.trim()).filter(|k| !k.is_empty()) else {
                return ActionResult::domain_error(&spec.name, format!("Missing argument {key_column}"));
            };
            let col = table.column(key_column).expect("key column checked at load");
            match table.find(col, key) {
                Some(row) => ActionResult::ok(&spec.name, table.render_row(row, template)),
                None => ActionResult::domain_error(&spec.name, format!("No data for {key}")),
            }
        }
        None => {
            let mut lines = Vec::with_capacity(table.rows.len() + 1);
            if let Some(header) = &cfg.header {
                lines.push(header.clone());
            }
            lines.extend(table.rows.iter().map(|row| table.render_row(row, template)));
            ActionResult::ok(&spec.name, lines.join("\n"))
        }
    }
}
