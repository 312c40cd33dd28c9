use linksql::corpus::{ColumnDef, DatabaseSchema, ForeignKey, TableDef};
use linksql::linkex::SchemaLink;
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::sample::Index;

/// An identifier: usually a plain word, sometimes one needing quotes.
pub fn ident() -> impl Strategy<Value = String> {
    prop_oneof![
        6 => "[a-z][a-z0-9_]{0,9}",
        2 => "[A-Z][A-Za-z0-9]{0,8}",
        2 => "[A-Za-z][A-Za-z0-9 ()%-]{0,10}[A-Za-z0-9)]",
        1 => "[a-z]{1,4}`[a-z]{1,4}",
        1 => Just("None".to_string()),
    ]
}

fn unique_by_key(names: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    names.into_iter().filter(|n| seen.insert(n.to_lowercase())).collect()
}

fn text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,.;:'(){}%=-]{0,160}"
}

fn column() -> impl Strategy<Value = (String, &'static str, bool, Option<String>, Option<String>)> {
    (
        ident(),
        prop::sample::select(vec!["TEXT", "INTEGER", "REAL", ""]),
        prop::bool::weighted(0.15),
        prop::option::weighted(0.6, text()),
        prop::option::weighted(0.3, text()),
    )
}

/// A random schema of 1 to 8 tables with descriptions and foreign keys.
pub fn schema() -> impl Strategy<Value = DatabaseSchema> {
    let table = (ident(), vec(column(), 1..14));
    (vec(table, 1..9), vec((any::<Index>(), any::<Index>(), any::<Index>(), any::<Index>()), 0..6)).prop_map(
        |(raw_tables, raw_fks)| {
            let mut names = std::collections::HashSet::new();
            let mut tables = Vec::new();
            for (name, cols) in raw_tables {
                if !names.insert(name.to_lowercase()) {
                    continue;
                }
                let col_names = unique_by_key(cols.iter().map(|c| c.0.clone()).collect());
                let columns = col_names
                    .iter()
                    .map(|n| {
                        let (_, ty, pk, desc, values) = cols.iter().find(|c| &c.0 == n).expect("column kept");
                        let mut c = ColumnDef::new(n.clone(), *ty);
                        if *pk {
                            c = c.primary_key();
                        }
                        if let Some(d) = desc {
                            c = c.described(d, values.as_deref());
                        }
                        c
                    })
                    .collect();
                tables.push(TableDef::new(name, columns));
            }
            let fks = raw_fks
                .iter()
                .map(|(a, ac, b, bc)| {
                    let from = &tables[a.index(tables.len())];
                    let to = &tables[b.index(tables.len())];
                    ForeignKey::new(
                        &from.name,
                        &from.columns[ac.index(from.columns.len())].name,
                        &to.name,
                        &to.columns[bc.index(to.columns.len())].name,
                    )
                })
                .collect();
            DatabaseSchema::new("random", tables, fks).expect("generated schema is valid")
        },
    )
}

/// A random link: tables with zero or more columns and foreign keys between
/// linked columns.
pub fn link() -> impl Strategy<Value = SchemaLink> {
    let table = (ident(), vec(ident(), 0..5));
    (vec(table, 0..5), vec((any::<Index>(), any::<Index>(), any::<Index>(), any::<Index>()), 0..3)).prop_map(
        |(tables, fks)| {
            let mut link = SchemaLink::new();
            for (name, cols) in tables {
                if link.contains_table(&name) {
                    continue;
                }
                link.add_table(&name);
                for c in cols {
                    link.add_column(&name, &c);
                }
            }
            let with_cols: Vec<(String, Vec<String>)> = link
                .tables()
                .iter()
                .filter(|t| !t.columns.is_empty())
                .map(|t| (t.name.clone(), t.columns.clone()))
                .collect();
            if !with_cols.is_empty() {
                for (a, ac, b, bc) in fks {
                    let (ta, ca) = &with_cols[a.index(with_cols.len())];
                    let (tb, cb) = &with_cols[b.index(with_cols.len())];
                    link.add_foreign_key(ForeignKey::new(
                        ta,
                        &ca[ac.index(ca.len())],
                        tb,
                        &cb[bc.index(cb.len())],
                    ));
                }
            }
            link
        },
    )
}

/// Question and hint text, including characters that look like template slots.
pub fn question_and_hint() -> impl Strategy<Value = (String, String)> {
    ("[A-Za-z0-9 ?,.'%{}-]{1,120}", "[A-Za-z0-9 =<>'.{}_-]{0,120}")
}
