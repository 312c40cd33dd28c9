//! Parse tree for one SQLite SELECT statement.

/// An identifier as written, remembering whether it was quoted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ident {
    pub value: String,
    pub quote: Option<char>,
}

impl Ident {
    pub fn bare(value: &str) -> Self {
        Ident { value: value.to_string(), quote: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub ctes: Vec<Cte>,
    pub body: SetExpr,
    pub order_by: Vec<OrderItem>,
    pub limit: Option<Limit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cte {
    pub name: Ident,
    pub columns: Vec<Ident>,
    pub query: Box<Query>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetOperator {
    Union,
    UnionAll,
    Intersect,
    Except,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SetExpr {
    Select(Box<Select>),
    SetOp {
        op: SetOperator,
        left: Box<SetExpr>,
        right: Box<SetExpr>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Select {
    pub distinct: bool,
    pub projection: Vec<SelectItem>,
    /// Comma-separated from-items; each may carry a chain of joins.
    pub from: Vec<FromItem>,
    pub selection: Option<Expr>,
    pub group_by: Vec<Expr>,
    pub having: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectItem {
    Wildcard,
    QualifiedWildcard(Ident),
    Expr { expr: Expr, alias: Option<Ident> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FromItem {
    pub base: TableFactor,
    pub joins: Vec<Join>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TableFactor {
    Table { name: Ident, alias: Option<Ident> },
    Derived { subquery: Box<Query>, alias: Option<Ident> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinKind {
    Inner,
    Left,
    Right,
    Full,
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JoinConstraint {
    On(Expr),
    Using(Vec<Ident>),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Join {
    pub kind: JoinKind,
    pub factor: TableFactor,
    pub constraint: JoinConstraint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderItem {
    pub expr: Expr,
    pub descending: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Limit {
    pub count: Expr,
    pub offset: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnRef {
    pub qualifier: Option<Ident>,
    pub name: Ident,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Number(String),
    String(String),
    Blob(String),
    Null,
    CurrentTime(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Column(ColumnRef),
    Literal(Literal),
    Unary {
        op: String,
        expr: Box<Expr>,
    },
    Binary {
        op: String,
        left: Box<Expr>,
        right: Box<Expr>,
    },
    Function {
        name: String,
        distinct: bool,
        star: bool,
        args: Vec<Expr>,
    },
    Case {
        operand: Option<Box<Expr>>,
        branches: Vec<(Expr, Expr)>,
        otherwise: Option<Box<Expr>>,
    },
    Cast {
        expr: Box<Expr>,
        type_name: String,
    },
    InList {
        expr: Box<Expr>,
        list: Vec<Expr>,
        negated: bool,
    },
    InSubquery {
        expr: Box<Expr>,
        subquery: Box<Query>,
        negated: bool,
    },
    Between {
        expr: Box<Expr>,
        low: Box<Expr>,
        high: Box<Expr>,
        negated: bool,
    },
    Like {
        op: String,
        expr: Box<Expr>,
        pattern: Box<Expr>,
        escape: Option<Box<Expr>>,
        negated: bool,
    },
    IsNull {
        expr: Box<Expr>,
        negated: bool,
    },
    Is {
        left: Box<Expr>,
        right: Box<Expr>,
        negated: bool,
    },
    Collate {
        expr: Box<Expr>,
        collation: String,
    },
    Subquery(Box<Query>),
    Exists {
        subquery: Box<Query>,
        negated: bool,
    },
    /// Parenthesized row value `(a, b)`.
    Row(Vec<Expr>),
}

/// Parsed form of one statement.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAst {
    pub query: Query,
}

impl QueryAst {
    /// All table factors (base tables and derived tables), at every nesting level.
    pub fn from_item_count(&self) -> usize {
        count_factors(&self.query)
    }

    /// Every column reference node, in traversal order.
    pub fn column_refs(&self) -> Vec<&ColumnRef> {
        let mut out = Vec::new();
        collect_column_refs(&self.query, &mut out);
        out
    }
}

fn collect_column_refs<'a>(q: &'a Query, out: &mut Vec<&'a ColumnRef>) {
    for cte in &q.ctes {
        collect_column_refs(&cte.query, out);
    }
    collect_set(&q.body, out);
    for o in &q.order_by {
        collect_expr(&o.expr, out);
    }
    if let Some(l) = &q.limit {
        collect_expr(&l.count, out);
        if let Some(off) = &l.offset {
            collect_expr(off, out);
        }
    }
}

fn collect_set<'a>(s: &'a SetExpr, out: &mut Vec<&'a ColumnRef>) {
    match s {
        SetExpr::Select(sel) => {
            for item in &sel.projection {
                if let SelectItem::Expr { expr, .. } = item {
                    collect_expr(expr, out);
                }
            }
            for f in &sel.from {
                collect_factor(&f.base, out);
                for j in &f.joins {
                    collect_factor(&j.factor, out);
                    if let JoinConstraint::On(e) = &j.constraint {
                        collect_expr(e, out);
                    }
                }
            }
            for e in sel.selection.iter().chain(&sel.group_by).chain(sel.having.iter()) {
                collect_expr(e, out);
            }
        }
        SetExpr::SetOp { left, right, .. } => {
            collect_set(left, out);
            collect_set(right, out);
        }
    }
}

fn collect_factor<'a>(f: &'a TableFactor, out: &mut Vec<&'a ColumnRef>) {
    if let TableFactor::Derived { subquery, .. } = f {
        collect_column_refs(subquery, out);
    }
}

fn collect_expr<'a>(e: &'a Expr, out: &mut Vec<&'a ColumnRef>) {
    match e {
        Expr::Column(c) => out.push(c),
        Expr::Subquery(q) | Expr::Exists { subquery: q, .. } => collect_column_refs(q, out),
        Expr::InSubquery { expr, subquery, .. } => {
            collect_expr(expr, out);
            collect_column_refs(subquery, out);
        }
        _ => {
            for child in expr_children(e) {
                collect_expr(child, out);
            }
        }
    }
}

/// Direct sub-expressions of an expression (not descending into subqueries).
pub(crate) fn expr_children(e: &Expr) -> Vec<&Expr> {
    match e {
        Expr::Column(_) | Expr::Literal(_) | Expr::Subquery(_) | Expr::Exists { .. } => vec![],
        Expr::Unary { expr, .. } | Expr::Cast { expr, .. } | Expr::Collate { expr, .. } => vec![expr],
        Expr::IsNull { expr, .. } | Expr::InSubquery { expr, .. } => vec![expr],
        Expr::Binary { left, right, .. } | Expr::Is { left, right, .. } => vec![left, right],
        Expr::Function { args, .. } | Expr::Row(args) => args.iter().collect(),
        Expr::Case {
            operand,
            branches,
            otherwise,
        } => {
            let mut v: Vec<&Expr> = operand.iter().map(|b| b.as_ref()).collect();
            for (w, t) in branches {
                v.push(w);
                v.push(t);
            }
            v.extend(otherwise.iter().map(|b| b.as_ref()));
            v
        }
        Expr::InList { expr, list, .. } => std::iter::once(expr.as_ref()).chain(list).collect(),
        Expr::Between { expr, low, high, .. } => vec![expr, low, high],
        Expr::Like {
            expr,
            pattern,
            escape,
            ..
        } => {
            let mut v = vec![expr.as_ref(), pattern.as_ref()];
            v.extend(escape.iter().map(|b| b.as_ref()));
            v
        }
    }
}

fn count_factors(q: &Query) -> usize {
    let mut n: usize = q.ctes.iter().map(|c| count_factors(&c.query)).sum();
    n += count_set(&q.body);
    n += q.order_by.iter().map(|o| count_expr(&o.expr)).sum::<usize>();
    n
}

fn count_set(s: &SetExpr) -> usize {
    match s {
        SetExpr::Select(sel) => {
            let mut n = 0;
            for item in &sel.projection {
                if let SelectItem::Expr { expr, .. } = item {
                    n += count_expr(expr);
                }
            }
            for f in &sel.from {
                n += count_factor(&f.base);
                for j in &f.joins {
                    n += count_factor(&j.factor);
                    if let JoinConstraint::On(e) = &j.constraint {
                        n += count_expr(e);
                    }
                }
            }
            for e in sel.selection.iter().chain(&sel.group_by).chain(sel.having.iter()) {
                n += count_expr(e);
            }
            n
        }
        SetExpr::SetOp { left, right, .. } => count_set(left) + count_set(right),
    }
}

fn count_factor(f: &TableFactor) -> usize {
    match f {
        TableFactor::Table { .. } => 1,
        TableFactor::Derived { subquery, .. } => 1 + count_factors(subquery),
    }
}

fn count_expr(e: &Expr) -> usize {
    match e {
        Expr::Subquery(q) | Expr::Exists { subquery: q, .. } => count_factors(q),
        Expr::InSubquery { expr, subquery, .. } => count_expr(expr) + count_factors(subquery),
        _ => expr_children(e).into_iter().map(count_expr).sum(),
    }
}
