//! Resolution of column references against a schema.

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use super::ast::*;
use super::link::SchemaLink;
use super::parser::parse_sql;
use super::LinkError;
use crate::corpus::{ident_eq, ident_key, DatabaseSchema};

/// (table index, column index) pairs in schema coordinates.
type Lineage = BTreeSet<(usize, usize)>;

#[derive(Debug, Clone)]
struct OutputColumn {
    name: Option<String>,
    lineage: Lineage,
}

#[derive(Debug, Clone)]
enum Source {
    Base(usize),
    Derived(Rc<Vec<OutputColumn>>),
}

#[derive(Debug, Clone)]
struct Entry {
    exposed: String,
    source: Source,
}

#[derive(Debug, Default)]
struct Scope {
    entries: Vec<Entry>,
    /// Column names equated by USING; unqualified references to them are not ambiguous.
    using: Vec<String>,
    /// Result-column aliases of the SELECT owning this scope.
    aliases: Vec<(String, Lineage)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum AliasRule {
    /// Aliases shadow columns (ORDER BY).
    First,
    /// Aliases only when no column matches (WHERE, GROUP BY, HAVING).
    Fallback,
    None,
}

type CteEnv = Vec<HashMap<String, Rc<Vec<OutputColumn>>>>;

struct Extractor<'s> {
    schema: &'s DatabaseSchema,
    columns: Lineage,
    tables: BTreeSet<usize>,
}

/// Extracts the schema link of one SELECT statement.
///
/// Qualified references resolve through the alias map, unqualified ones to the
/// unique in-scope table that has the column, `*` expands to concrete columns,
/// and columns used inside subqueries and CTEs are attributed to their base
/// tables. Foreign keys are included when both endpoint tables are used.
/// Output identifiers use the schema's casing.
pub fn extract_links(sql: &str, schema: &DatabaseSchema) -> Result<SchemaLink, LinkError> {
    let ast = parse_sql(sql)?;
    extract_from_ast(&ast, schema)
}

pub fn extract_from_ast(ast: &QueryAst, schema: &DatabaseSchema) -> Result<SchemaLink, LinkError> {
    let mut ex = Extractor {
        schema,
        columns: BTreeSet::new(),
        tables: BTreeSet::new(),
    };
    let mut env = CteEnv::new();
    ex.query(&ast.query, &[], &mut env)?;

    let mut link = SchemaLink::new();
    let mut tables: BTreeSet<usize> = ex.tables.clone();
    tables.extend(ex.columns.iter().map(|(t, _)| *t));
    for t in &tables {
        link.add_table(&schema.tables[*t].name);
    }
    for (t, c) in &ex.columns {
        let table = &schema.tables[*t];
        link.add_column(&table.name, &table.columns[*c].name);
    }
    link.complete_foreign_keys(schema);
    Ok(link)
}

impl<'s> Extractor<'s> {
    fn query(&mut self, q: &Query, outer: &[&Scope], env: &mut CteEnv) -> Result<Rc<Vec<OutputColumn>>, LinkError> {
        env.push(HashMap::new());
        let result = self.query_inner(q, outer, env);
        env.pop();
        result
    }

    fn query_inner(&mut self, q: &Query, outer: &[&Scope], env: &mut CteEnv) -> Result<Rc<Vec<OutputColumn>>, LinkError> {
        for cte in &q.ctes {
            let mut outputs = (*self.query(&cte.query, outer, env)?).clone();
            if !cte.columns.is_empty() {
                for (out, name) in outputs.iter_mut().zip(&cte.columns) {
                    out.name = Some(name.value.clone());
                }
            }
            env.last_mut()
                .expect("cte layer pushed")
                .insert(ident_key(&cte.name.value), Rc::new(outputs));
        }

        match &q.body {
            SetExpr::Select(sel) => {
                let (outputs, scope) = self.select(sel, outer, env)?;
                let mut chain: Vec<&Scope> = outer.to_vec();
                chain.push(&scope);
                for item in &q.order_by {
                    self.expr(&item.expr, &chain, env, AliasRule::First)?;
                }
                if let Some(limit) = &q.limit {
                    self.expr(&limit.count, outer, env, AliasRule::None)?;
                    if let Some(off) = &limit.offset {
                        self.expr(off, outer, env, AliasRule::None)?;
                    }
                }
                Ok(Rc::new(outputs))
            }
            body @ SetExpr::SetOp { .. } => {
                let outputs = self.set_expr(body, outer, env)?;
                // ORDER BY on a compound select refers to result columns.
                let scope = Scope {
                    aliases: outputs
                        .iter()
                        .filter_map(|o| o.name.clone().map(|n| (n, o.lineage.clone())))
                        .collect(),
                    ..Scope::default()
                };
                let mut chain: Vec<&Scope> = outer.to_vec();
                chain.push(&scope);
                for item in &q.order_by {
                    self.expr(&item.expr, &chain, env, AliasRule::First)?;
                }
                if let Some(limit) = &q.limit {
                    self.expr(&limit.count, outer, env, AliasRule::None)?;
                    if let Some(off) = &limit.offset {
                        self.expr(off, outer, env, AliasRule::None)?;
                    }
                }
                Ok(Rc::new(outputs))
            }
        }
    }

    fn set_expr(&mut self, s: &SetExpr, outer: &[&Scope], env: &mut CteEnv) -> Result<Vec<OutputColumn>, LinkError> {
        match s {
            SetExpr::Select(sel) => Ok(self.select(sel, outer, env)?.0),
            SetExpr::SetOp { left, right, .. } => {
                let mut l = self.set_expr(left, outer, env)?;
                let r = self.set_expr(right, outer, env)?;
                for (lo, ro) in l.iter_mut().zip(r) {
                    lo.lineage.extend(ro.lineage);
                }
                Ok(l)
            }
        }
    }

    fn select(&mut self, sel: &Select, outer: &[&Scope], env: &mut CteEnv) -> Result<(Vec<OutputColumn>, Scope), LinkError> {
        let mut scope = Scope::default();
        let mut pending_on: Vec<&Expr> = Vec::new();
        for item in &sel.from {
            self.factor(&item.base, outer, env, &mut scope)?;
            for join in &item.joins {
                let before = scope.entries.len();
                self.factor(&join.factor, outer, env, &mut scope)?;
                match &join.constraint {
                    JoinConstraint::On(e) => pending_on.push(e),
                    JoinConstraint::Using(cols) => {
                        for col in cols {
                            self.using_column(&scope, before, &col.value)?;
                            scope.using.push(ident_key(&col.value));
                        }
                    }
                    JoinConstraint::None => {}
                }
            }
        }

        let mut chain: Vec<&Scope> = outer.to_vec();
        chain.push(&scope);
        for e in pending_on {
            self.expr(e, &chain, env, AliasRule::None)?;
        }

        let mut outputs = Vec::new();
        for item in &sel.projection {
            match item {
                SelectItem::Wildcard => {
                    if scope.entries.is_empty() {
                        return Err(LinkError::UnknownTable { table: "*".into() });
                    }
                    for entry in &scope.entries {
                        outputs.extend(self.expand_entry(entry));
                    }
                }
                SelectItem::QualifiedWildcard(q) => {
                    let entry = scope
                        .entries
                        .iter()
                        .find(|e| ident_eq(&e.exposed, &q.value))
                        .ok_or_else(|| LinkError::UnknownTable { table: q.value.clone() })?;
                    outputs.extend(self.expand_entry(entry));
                }
                SelectItem::Expr { expr, alias } => {
                    let lineage = self.expr(expr, &chain, env, AliasRule::None)?;
                    let name = alias.as_ref().map(|a| a.value.clone()).or_else(|| match expr {
                        Expr::Column(c) => Some(c.name.value.clone()),
                        _ => None,
                    });
                    outputs.push(OutputColumn { name, lineage });
                }
            }
        }
        let aliases: Vec<(String, Lineage)> = sel
            .projection
            .iter()
            .zip(&outputs)
            .filter_map(|(item, out)| match item {
                SelectItem::Expr { alias: Some(a), .. } => Some((a.value.clone(), out.lineage.clone())),
                _ => None,
            })
            .collect();
        drop(chain);
        scope.aliases = aliases;

        let mut chain: Vec<&Scope> = outer.to_vec();
        chain.push(&scope);
        if let Some(w) = &sel.selection {
            self.expr(w, &chain, env, AliasRule::Fallback)?;
        }
        for g in &sel.group_by {
            self.expr(g, &chain, env, AliasRule::Fallback)?;
        }
        if let Some(h) = &sel.having {
            self.expr(h, &chain, env, AliasRule::Fallback)?;
        }
        drop(chain);
        Ok((outputs, scope))
    }

    fn factor(&mut self, f: &TableFactor, outer: &[&Scope], env: &mut CteEnv, scope: &mut Scope) -> Result<(), LinkError> {
        match f {
            TableFactor::Table { name, alias } => {
                let exposed = alias.as_ref().unwrap_or(name).value.clone();
                let key = ident_key(&name.value);
                if let Some(cte) = env.iter().rev().find_map(|layer| layer.get(&key)) {
                    scope.entries.push(Entry { exposed, source: Source::Derived(Rc::clone(cte)) });
                    return Ok(());
                }
                let idx = self
                    .schema
                    .table_index(&name.value)
                    .ok_or_else(|| LinkError::UnknownTable { table: name.value.clone() })?;
                self.tables.insert(idx);
                scope.entries.push(Entry { exposed, source: Source::Base(idx) });
            }
            TableFactor::Derived { subquery, alias } => {
                let outputs = self.query(subquery, outer, env)?;
                let exposed = alias.as_ref().map(|a| a.value.clone()).unwrap_or_default();
                scope.entries.push(Entry { exposed, source: Source::Derived(outputs) });
            }
        }
        Ok(())
    }

    /// Marks a USING column on the newly joined entry and on the first
    /// earlier entry that has it.
    fn using_column(&mut self, scope: &Scope, joined_from: usize, col: &str) -> Result<(), LinkError> {
        let right = scope.entries[joined_from..]
            .iter()
            .find_map(|e| self.entry_column(e, col))
            .ok_or_else(|| LinkError::UnknownColumn { column: col.to_string(), qualifier: None })?;
        let left = scope.entries[..joined_from]
            .iter()
            .find_map(|e| self.entry_column(e, col))
            .ok_or_else(|| LinkError::UnknownColumn { column: col.to_string(), qualifier: None })?;
        self.columns.extend(right);
        self.columns.extend(left);
        Ok(())
    }

    fn expand_entry(&mut self, entry: &Entry) -> Vec<OutputColumn> {
        match &entry.source {
            Source::Base(t) => {
                let table = &self.schema.tables[*t];
                (0..table.columns.len())
                    .map(|c| {
                        self.columns.insert((*t, c));
                        OutputColumn {
                            name: Some(table.columns[c].name.clone()),
                            lineage: [(*t, c)].into_iter().collect(),
                        }
                    })
                    .collect()
            }
            Source::Derived(outs) => {
                for o in outs.iter() {
                    self.columns.extend(o.lineage.iter().copied());
                }
                outs.as_ref().clone()
            }
        }
    }

    /// Lineage of `col` in one entry, if the entry exposes it.
    fn entry_column(&self, entry: &Entry, col: &str) -> Option<Lineage> {
        match &entry.source {
            Source::Base(t) => self.schema.tables[*t]
                .column_index(col)
                .map(|c| [(*t, c)].into_iter().collect()),
            Source::Derived(outs) => outs
                .iter()
                .find(|o| o.name.as_deref().is_some_and(|n| ident_eq(n, col)))
                .map(|o| o.lineage.clone()),
        }
    }

    fn expr(&mut self, e: &Expr, scopes: &[&Scope], env: &mut CteEnv, rule: AliasRule) -> Result<Lineage, LinkError> {
        match e {
            Expr::Column(c) => {
                let lineage = self.column(c, scopes, rule)?;
                self.columns.extend(lineage.iter().copied());
                Ok(lineage)
            }
            Expr::Subquery(q) | Expr::Exists { subquery: q, .. } => {
                let outs = self.query(q, scopes, env)?;
                Ok(outs.iter().flat_map(|o| o.lineage.iter().copied()).collect())
            }
            Expr::InSubquery { expr, subquery, .. } => {
                let mut l = self.expr(expr, scopes, env, rule)?;
                let outs = self.query(subquery, scopes, env)?;
                l.extend(outs.iter().flat_map(|o| o.lineage.iter().copied()));
                Ok(l)
            }
            _ => {
                let mut l = Lineage::new();
                for child in expr_children(e) {
                    l.extend(self.expr(child, scopes, env, rule)?);
                }
                Ok(l)
            }
        }
    }

    fn column(&self, c: &ColumnRef, scopes: &[&Scope], rule: AliasRule) -> Result<Lineage, LinkError> {
        let name = &c.name.value;
        if let Some(q) = &c.qualifier {
            for scope in scopes.iter().rev() {
                if let Some(entry) = scope.entries.iter().find(|e| ident_eq(&e.exposed, &q.value)) {
                    return match self.entry_column(entry, name) {
                        Some(l) => Ok(l),
                        None if is_rowid(name) => Ok(Lineage::new()),
                        None => Err(LinkError::UnknownColumn {
                            column: name.clone(),
                            qualifier: Some(q.value.clone()),
                        }),
                    };
                }
            }
            return Err(LinkError::UnknownTable { table: q.value.clone() });
        }

        let alias = |scope: &Scope| {
            scope
                .aliases
                .iter()
                .find(|(a, _)| ident_eq(a, name))
                .map(|(_, l)| l.clone())
        };
        if rule == AliasRule::First {
            if let Some(l) = scopes.last().and_then(|s| alias(s)) {
                return Ok(l);
            }
        }
        for scope in scopes.iter().rev() {
            let hits: Vec<(&Entry, Lineage)> = scope
                .entries
                .iter()
                .filter_map(|e| self.entry_column(e, name).map(|l| (e, l)))
                .collect();
            match hits.len() {
                0 => continue,
                1 => return Ok(hits.into_iter().next().expect("one hit").1),
                _ if scope.using.contains(&ident_key(name)) => {
                    return Ok(hits.into_iter().next().expect("hits").1);
                }
                _ => {
                    return Err(LinkError::Ambiguous {
                        column: name.clone(),
                        candidates: hits
                            .iter()
                            .map(|(e, _)| format!("{}.{}", e.exposed, name))
                            .collect(),
                    })
                }
            }
        }
        if rule == AliasRule::Fallback {
            if let Some(l) = scopes.last().and_then(|s| alias(s)) {
                return Ok(l);
            }
        }
        if is_rowid(name) {
            return Ok(Lineage::new());
        }
        // SQLite reads an unresolvable double-quoted identifier as a string.
        if c.name.quote == Some('"') {
            return Ok(Lineage::new());
        }
        Err(LinkError::UnknownColumn { column: name.clone(), qualifier: None })
    }
}

fn is_rowid(name: &str) -> bool {
    ["rowid", "oid", "_rowid_"].iter().any(|r| r.eq_ignore_ascii_case(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ColumnDef, ForeignKey, TableDef};
    use crate::linkex::serialize_link;

    fn toy() -> DatabaseSchema {
        DatabaseSchema::new(
            "toy",
            vec![
                TableDef::new(
                    "schools",
                    vec![
                        ColumnDef::new("CDSCode", "TEXT").primary_key(),
                        ColumnDef::new("MailStreet", "TEXT"),
                        ColumnDef::new("Charter", "INTEGER"),
                    ],
                ),
                TableDef::new(
                    "frpm",
                    vec![ColumnDef::new("CDSCode", "TEXT"), ColumnDef::new("FRPM_Count", "REAL")],
                ),
            ],
            vec![ForeignKey::new("frpm", "CDSCode", "schools", "CDSCode")],
        )
        .unwrap()
    }

    fn pairs(link: &SchemaLink) -> Vec<(String, String)> {
        let mut v: Vec<_> = link.columns().map(|(t, c)| (t.to_string(), c.to_string())).collect();
        v.sort();
        v
    }

    #[test]
    fn aliased_join() {
        let link = extract_links(
            "SELECT T1.MailStreet FROM schools AS T1 INNER JOIN frpm AS T2 ON T1.CDSCode = T2.CDSCode WHERE T2.FRPM_Count > 500",
            &toy(),
        )
        .unwrap();
        let expected: Vec<(String, String)> = [
            ("frpm", "CDSCode"),
            ("frpm", "FRPM_Count"),
            ("schools", "CDSCode"),
            ("schools", "MailStreet"),
        ]
        .iter()
        .map(|(t, c)| (t.to_string(), c.to_string()))
        .collect();
        assert_eq!(pairs(&link), expected);
        assert_eq!(link.foreign_keys(), &[ForeignKey::new("frpm", "CDSCode", "schools", "CDSCode")]);
        assert_eq!(
            serialize_link(&link),
            "frpm(CDSCode, FRPM_Count)\nschools(CDSCode, MailStreet)\nfrpm.CDSCode = schools.CDSCode"
        );
    }

    #[test]
    fn star_expands_without_fks() {
        let link = extract_links("SELECT * FROM schools", &toy()).unwrap();
        assert_eq!(serialize_link(&link), "schools(CDSCode, MailStreet, Charter)");
        assert!(link.foreign_keys().is_empty());
    }

    #[test]
    fn canonical_casing() {
        let link = extract_links("SELECT cdscode FROM SCHOOLS", &toy()).unwrap();
        assert_eq!(serialize_link(&link), "schools(CDSCode)");
    }

    #[test]
    fn ambiguous_unqualified_column() {
        match extract_links("SELECT CDSCode FROM schools, frpm", &toy()) {
            Err(LinkError::Ambiguous { column, candidates }) => {
                assert_eq!(column, "CDSCode");
                assert_eq!(candidates, vec!["schools.CDSCode", "frpm.CDSCode"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_column() {
        assert!(matches!(
            extract_links("SELECT Banana FROM schools", &toy()),
            Err(LinkError::UnknownColumn { .. })
        ));
        assert!(matches!(
            extract_links("SELECT T9.CDSCode FROM schools AS T1", &toy()),
            Err(LinkError::UnknownTable { .. })
        ));
    }

    #[test]
    fn using_join_disambiguates() {
        let link = extract_links("SELECT CDSCode, FRPM_Count FROM schools JOIN frpm USING (CDSCode)", &toy()).unwrap();
        assert_eq!(
            serialize_link(&link),
            "frpm(CDSCode, FRPM_Count)\nschools(CDSCode)\nfrpm.CDSCode = schools.CDSCode"
        );
    }

    #[test]
    fn count_star_keeps_table() {
        let link = extract_links("SELECT COUNT(*) FROM schools", &toy()).unwrap();
        assert_eq!(serialize_link(&link), "schools()");
    }

    #[test]
    fn order_by_alias_and_double_quoted_string() {
        let link = extract_links(
            "SELECT Charter AS c, COUNT(*) AS n FROM schools WHERE MailStreet = \"Main St\" GROUP BY c ORDER BY n DESC",
            &toy(),
        )
        .unwrap();
        assert_eq!(serialize_link(&link), "schools(MailStreet, Charter)");
    }

    #[test]
    fn correlated_subquery_resolves_outward() {
        let link = extract_links(
            "SELECT MailStreet FROM schools AS s WHERE EXISTS (SELECT 1 FROM frpm WHERE frpm.CDSCode = s.CDSCode AND FRPM_Count > 1)",
            &toy(),
        )
        .unwrap();
        assert_eq!(
            serialize_link(&link),
            "frpm(CDSCode, FRPM_Count)\nschools(CDSCode, MailStreet)\nfrpm.CDSCode = schools.CDSCode"
        );
    }

    #[test]
    fn cte_columns_trace_to_base_tables() {
        let link = extract_links(
            "WITH big(code, cnt) AS (SELECT CDSCode, FRPM_Count * 2 FROM frpm) SELECT s.MailStreet FROM schools s JOIN big b ON s.CDSCode = b.code WHERE b.cnt > 3",
            &toy(),
        )
        .unwrap();
        assert_eq!(
            serialize_link(&link),
            "frpm(CDSCode, FRPM_Count)\nschools(CDSCode, MailStreet)\nfrpm.CDSCode = schools.CDSCode"
        );
    }

    #[test]
    fn extraction_is_deterministic() {
        let sql = "SELECT T2.FRPM_Count FROM schools T1 JOIN frpm T2 ON T1.CDSCode = T2.CDSCode";
        let a = serialize_link(&extract_links(sql, &toy()).unwrap());
        let b = serialize_link(&extract_links(sql, &toy()).unwrap());
        assert_eq!(a, b);
    }
}
