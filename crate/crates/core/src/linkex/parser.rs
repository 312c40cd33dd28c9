//! Recursive-descent parser for SQLite SELECT statements.
//!
//! Anything outside the supported grammar fails with a structured error that
//! names the offending token and its byte offset; there is no partial parse.

use super::ast::*;
use super::lexer::{tokenize, Token, TokenKind};
use super::LinkError;

const RESERVED: &[&str] = &[
    "ALL", "AND", "AS", "ASC", "BETWEEN", "BY", "CASE", "CAST", "COLLATE", "CROSS",
    "CURRENT_DATE", "CURRENT_TIME", "CURRENT_TIMESTAMP", "DESC", "DISTINCT", "ELSE", "END",
    "ESCAPE", "EXCEPT", "EXISTS", "FILTER", "FROM", "FULL", "GLOB", "GROUP", "HAVING", "IN",
    "INDEXED", "INNER", "INTERSECT", "IS", "ISNULL", "JOIN", "LEFT", "LIKE", "LIMIT", "MATCH",
    "NATURAL", "NOT", "NOTNULL", "NULL", "OFFSET", "ON", "OR", "ORDER", "OUTER", "OVER",
    "REGEXP", "RIGHT", "SELECT", "THEN", "UNION", "USING", "VALUES", "WHEN", "WHERE", "WINDOW",
    "WITH",
];

const STATEMENT_KEYWORDS: &[&str] = &[
    "INSERT", "UPDATE", "DELETE", "REPLACE", "CREATE", "DROP", "ALTER", "ATTACH", "DETACH",
    "PRAGMA", "VACUUM", "ANALYZE", "BEGIN", "COMMIT", "ROLLBACK", "EXPLAIN", "REINDEX", "VALUES",
];

fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|k| k.eq_ignore_ascii_case(word))
}

/// Parses one SELECT statement. A trailing semicolon is allowed.
pub fn parse_sql(sql: &str) -> Result<QueryAst, LinkError> {
    let tokens = tokenize(sql)?;
    let mut p = Parser { tokens, pos: 0 };
    let first = p.peek().clone();
    if first.kind == TokenKind::Eof {
        return Err(LinkError::Syntax {
            token: first.display(),
            offset: first.offset,
            detail: "empty statement".into(),
        });
    }
    if !(first.is_keyword("SELECT") || first.is_keyword("WITH")) {
        let detail = match &first.kind {
            TokenKind::Word(w) if STATEMENT_KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(w)) => {
                "only SELECT statements are supported"
            }
            _ => "statement must start with SELECT or WITH",
        };
        return Err(p.unsupported(&first, detail));
    }
    let query = p.parse_query()?;
    while p.peek().is_punct(";") {
        p.advance();
    }
    let tok = p.peek().clone();
    if tok.kind != TokenKind::Eof {
        return Err(if p.tokens[p.pos.saturating_sub(1)].is_punct(";") {
            p.unsupported(&tok, "multiple statements")
        } else {
            p.syntax(&tok, "unexpected token after statement")
        });
    }
    Ok(QueryAst { query })
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

type PResult<T> = Result<T, LinkError>;

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn peek_at(&self, n: usize) -> &Token {
        let i = (self.pos + n).min(self.tokens.len() - 1);
        &self.tokens[i]
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn syntax(&self, tok: &Token, detail: &str) -> LinkError {
        LinkError::Syntax {
            token: tok.display(),
            offset: tok.offset,
            detail: detail.to_string(),
        }
    }

    fn unsupported(&self, tok: &Token, detail: &str) -> LinkError {
        LinkError::Unsupported {
            token: tok.display(),
            offset: tok.offset,
            detail: detail.to_string(),
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.peek().is_keyword(kw) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.peek().is_punct(p) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> PResult<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            let t = self.peek().clone();
            Err(self.syntax(&t, &format!("expected {kw}")))
        }
    }

    fn expect_punct(&mut self, p: &str) -> PResult<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            let t = self.peek().clone();
            Err(self.syntax(&t, &format!("expected `{p}`")))
        }
    }

    fn starts_query(&self) -> bool {
        self.peek().is_keyword("SELECT") || self.peek().is_keyword("WITH")
    }

    /// Identifier: quoted, or a bare word that is not reserved.
    fn parse_ident(&mut self) -> PResult<Ident> {
        let t = self.peek().clone();
        match t.kind {
            TokenKind::Quoted { text, quote } => {
                self.advance();
                Ok(Ident { value: text, quote: Some(quote) })
            }
            TokenKind::Word(w) if !is_reserved(&w) => {
                self.advance();
                Ok(Ident { value: w, quote: None })
            }
            _ => Err(self.syntax(&t, "expected identifier")),
        }
    }

    /// Optional alias, with or without AS.
    fn parse_alias(&mut self) -> PResult<Option<Ident>> {
        if self.eat_keyword("AS") {
            let t = self.peek().clone();
            if let TokenKind::Str(s) = t.kind {
                self.advance();
                return Ok(Some(Ident { value: s, quote: Some('\'') }));
            }
            return self.parse_ident().map(Some);
        }
        match &self.peek().kind {
            TokenKind::Quoted { .. } => self.parse_ident().map(Some),
            TokenKind::Word(w) if !is_reserved(w) => self.parse_ident().map(Some),
            _ => Ok(None),
        }
    }

    fn parse_query(&mut self) -> PResult<Query> {
        let mut ctes = Vec::new();
        if self.eat_keyword("WITH") {
            if self.peek().is_keyword("RECURSIVE") {
                let t = self.peek().clone();
                return Err(self.unsupported(&t, "recursive common table expressions"));
            }
            loop {
                let name = self.parse_ident()?;
                let mut columns = Vec::new();
                if self.eat_punct("(") {
                    loop {
                        columns.push(self.parse_ident()?);
                        if !self.eat_punct(",") {
                            break;
                        }
                    }
                    self.expect_punct(")")?;
                }
                self.expect_keyword("AS")?;
                if self.eat_keyword("NOT") {
                    self.expect_keyword("MATERIALIZED")?;
                } else {
                    self.eat_keyword("MATERIALIZED");
                }
                self.expect_punct("(")?;
                let query = self.parse_query()?;
                self.expect_punct(")")?;
                ctes.push(Cte { name, columns, query: Box::new(query) });
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        let body = self.parse_set_expr()?;
        let mut order_by = Vec::new();
        if self.eat_keyword("ORDER") {
            self.expect_keyword("BY")?;
            loop {
                let expr = self.parse_expr()?;
                let descending = if self.eat_keyword("DESC") {
                    true
                } else {
                    self.eat_keyword("ASC");
                    false
                };
                if self.eat_keyword("NULLS") && !(self.eat_keyword("FIRST") || self.eat_keyword("LAST")) {
                    let t = self.peek().clone();
                    return Err(self.syntax(&t, "expected FIRST or LAST"));
                }
                order_by.push(OrderItem { expr, descending });
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        let mut limit = None;
        if self.eat_keyword("LIMIT") {
            let first = self.parse_expr()?;
            limit = Some(if self.eat_keyword("OFFSET") {
                Limit { count: first, offset: Some(self.parse_expr()?) }
            } else if self.eat_punct(",") {
                // LIMIT offset, count
                let count = self.parse_expr()?;
                Limit { count, offset: Some(first) }
            } else {
                Limit { count: first, offset: None }
            });
        }
        Ok(Query { ctes, body, order_by, limit })
    }

    fn parse_set_expr(&mut self) -> PResult<SetExpr> {
        let mut left = SetExpr::Select(Box::new(self.parse_select_core()?));
        loop {
            let op = if self.eat_keyword("UNION") {
                if self.eat_keyword("ALL") {
                    SetOperator::UnionAll
                } else {
                    SetOperator::Union
                }
            } else if self.eat_keyword("INTERSECT") {
                SetOperator::Intersect
            } else if self.eat_keyword("EXCEPT") {
                SetOperator::Except
            } else {
                break;
            };
            let right = SetExpr::Select(Box::new(self.parse_select_core()?));
            left = SetExpr::SetOp { op, left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn parse_select_core(&mut self) -> PResult<Select> {
        let t = self.peek().clone();
        if t.is_keyword("VALUES") {
            return Err(self.unsupported(&t, "VALUES clauses"));
        }
        if !self.eat_keyword("SELECT") {
            return Err(self.syntax(&t, "expected SELECT"));
        }
        let distinct = if self.eat_keyword("DISTINCT") {
            true
        } else {
            self.eat_keyword("ALL");
            false
        };
        let mut projection = Vec::new();
        loop {
            projection.push(self.parse_select_item()?);
            if !self.eat_punct(",") {
                break;
            }
        }
        let mut from = Vec::new();
        if self.eat_keyword("FROM") {
            loop {
                from.push(self.parse_from_item()?);
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        let selection = if self.eat_keyword("WHERE") { Some(self.parse_expr()?) } else { None };
        let mut group_by = Vec::new();
        if self.eat_keyword("GROUP") {
            self.expect_keyword("BY")?;
            loop {
                group_by.push(self.parse_expr()?);
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        let having = if self.eat_keyword("HAVING") { Some(self.parse_expr()?) } else { None };
        let t = self.peek().clone();
        if t.is_keyword("WINDOW") {
            return Err(self.unsupported(&t, "window definitions"));
        }
        Ok(Select { distinct, projection, from, selection, group_by, having })
    }

    fn parse_select_item(&mut self) -> PResult<SelectItem> {
        if self.eat_punct("*") {
            return Ok(SelectItem::Wildcard);
        }
        let is_ident = matches!(self.peek().kind, TokenKind::Quoted { .. })
            || matches!(&self.peek().kind, TokenKind::Word(w) if !is_reserved(w));
        if is_ident && self.peek_at(1).is_punct(".") && self.peek_at(2).is_punct("*") {
            let q = self.parse_ident()?;
            self.advance();
            self.advance();
            return Ok(SelectItem::QualifiedWildcard(q));
        }
        let expr = self.parse_expr()?;
        let alias = self.parse_alias()?;
        Ok(SelectItem::Expr { expr, alias })
    }

    fn parse_from_item(&mut self) -> PResult<FromItem> {
        let base = self.parse_table_factor()?;
        let mut joins = Vec::new();
        loop {
            let t = self.peek().clone();
            if t.is_keyword("NATURAL") {
                return Err(self.unsupported(&t, "NATURAL joins"));
            }
            let kind = if self.eat_keyword("JOIN") {
                JoinKind::Inner
            } else if self.eat_keyword("INNER") {
                self.expect_keyword("JOIN")?;
                JoinKind::Inner
            } else if self.eat_keyword("CROSS") {
                self.expect_keyword("JOIN")?;
                JoinKind::Cross
            } else if t.is_keyword("LEFT") || t.is_keyword("RIGHT") || t.is_keyword("FULL") {
                self.advance();
                self.eat_keyword("OUTER");
                self.expect_keyword("JOIN")?;
                if t.is_keyword("LEFT") {
                    JoinKind::Left
                } else if t.is_keyword("RIGHT") {
                    JoinKind::Right
                } else {
                    JoinKind::Full
                }
            } else {
                break;
            };
            let factor = self.parse_table_factor()?;
            let constraint = if self.eat_keyword("ON") {
                JoinConstraint::On(self.parse_expr()?)
            } else if self.eat_keyword("USING") {
                self.expect_punct("(")?;
                let mut cols = Vec::new();
                loop {
                    cols.push(self.parse_ident()?);
                    if !self.eat_punct(",") {
                        break;
                    }
                }
                self.expect_punct(")")?;
                JoinConstraint::Using(cols)
            } else {
                JoinConstraint::None
            };
            joins.push(Join { kind, factor, constraint });
        }
        Ok(FromItem { base, joins })
    }

    fn parse_table_factor(&mut self) -> PResult<TableFactor> {
        if self.peek().is_punct("(") {
            let open = self.advance();
            if !self.starts_query() {
                return Err(self.unsupported(&open, "parenthesized join expressions"));
            }
            let subquery = self.parse_query()?;
            self.expect_punct(")")?;
            let alias = self.parse_alias()?;
            return Ok(TableFactor::Derived { subquery: Box::new(subquery), alias });
        }
        let mut name = self.parse_ident()?;
        if self.eat_punct(".") {
            // schema-qualified: main.tbl
            name = self.parse_ident()?;
        }
        let t = self.peek().clone();
        if t.is_punct("(") {
            return Err(self.unsupported(&t, "table-valued functions"));
        }
        let alias = self.parse_alias()?;
        let t = self.peek().clone();
        if t.is_keyword("INDEXED") || (t.is_keyword("NOT") && self.peek_at(1).is_keyword("INDEXED")) {
            return Err(self.unsupported(&t, "index hints"));
        }
        Ok(TableFactor::Table { name, alias })
    }

    pub(crate) fn parse_expr(&mut self) -> PResult<Expr> {
        self.parse_or()
    }

    fn parse_or(&mut self) -> PResult<Expr> {
        let mut left = self.parse_and()?;
        while self.eat_keyword("OR") {
            let right = self.parse_and()?;
            left = binary("OR", left, right);
        }
        Ok(left)
    }

    fn parse_and(&mut self) -> PResult<Expr> {
        let mut left = self.parse_not()?;
        while self.eat_keyword("AND") {
            let right = self.parse_not()?;
            left = binary("AND", left, right);
        }
        Ok(left)
    }

    fn parse_not(&mut self) -> PResult<Expr> {
        if self.eat_keyword("NOT") {
            let inner = self.parse_not()?;
            return Ok(match inner {
                Expr::Exists { subquery, negated } => Expr::Exists { subquery, negated: !negated },
                other => Expr::Unary { op: "NOT".into(), expr: Box::new(other) },
            });
        }
        self.parse_equality()
    }

    fn parse_equality(&mut self) -> PResult<Expr> {
        let mut left = self.parse_comparison()?;
        loop {
            let t = self.peek().clone();
            if let TokenKind::Punct(op @ ("=" | "==" | "!=" | "<>")) = t.kind {
                self.advance();
                let right = self.parse_comparison()?;
                left = binary(op, left, right);
                continue;
            }
            if self.eat_keyword("ISNULL") {
                left = Expr::IsNull { expr: Box::new(left), negated: false };
                continue;
            }
            if self.eat_keyword("NOTNULL") {
                left = Expr::IsNull { expr: Box::new(left), negated: true };
                continue;
            }
            if self.eat_keyword("IS") {
                let negated = self.eat_keyword("NOT");
                if self.eat_keyword("DISTINCT") {
                    self.expect_keyword("FROM")?;
                    let right = self.parse_comparison()?;
                    left = Expr::Is { left: Box::new(left), right: Box::new(right), negated: !negated };
                    continue;
                }
                if self.eat_keyword("NULL") {
                    left = Expr::IsNull { expr: Box::new(left), negated };
                    continue;
                }
                let right = self.parse_comparison()?;
                left = Expr::Is { left: Box::new(left), right: Box::new(right), negated };
                continue;
            }
            let negated = t.is_keyword("NOT");
            let op_tok = if negated { self.peek_at(1).clone() } else { t.clone() };
            if negated && op_tok.is_keyword("NULL") {
                self.advance();
                self.advance();
                left = Expr::IsNull { expr: Box::new(left), negated: true };
                continue;
            }
            if op_tok.is_keyword("IN") {
                if negated {
                    self.advance();
                }
                self.advance();
                left = self.parse_in_rhs(left, negated)?;
                continue;
            }
            if ["LIKE", "GLOB", "REGEXP", "MATCH"].iter().any(|k| op_tok.is_keyword(k)) {
                if negated {
                    self.advance();
                }
                self.advance();
                let op = match &op_tok.kind {
                    TokenKind::Word(w) => w.to_ascii_uppercase(),
                    _ => unreachable!(),
                };
                let pattern = self.parse_comparison()?;
                let escape = if self.eat_keyword("ESCAPE") {
                    Some(Box::new(self.parse_comparison()?))
                } else {
                    None
                };
                left = Expr::Like {
                    op,
                    expr: Box::new(left),
                    pattern: Box::new(pattern),
                    escape,
                    negated,
                };
                continue;
            }
            if op_tok.is_keyword("BETWEEN") {
                if negated {
                    self.advance();
                }
                self.advance();
                let low = self.parse_comparison()?;
                self.expect_keyword("AND")?;
                let high = self.parse_comparison()?;
                left = Expr::Between {
                    expr: Box::new(left),
                    low: Box::new(low),
                    high: Box::new(high),
                    negated,
                };
                continue;
            }
            break;
        }
        Ok(left)
    }

    fn parse_in_rhs(&mut self, left: Expr, negated: bool) -> PResult<Expr> {
        let t = self.peek().clone();
        if !self.eat_punct("(") {
            return Err(self.unsupported(&t, "IN without a parenthesized list"));
        }
        if self.starts_query() {
            let q = self.parse_query()?;
            self.expect_punct(")")?;
            return Ok(Expr::InSubquery { expr: Box::new(left), subquery: Box::new(q), negated });
        }
        let mut list = Vec::new();
        if !self.peek().is_punct(")") {
            loop {
                list.push(self.parse_expr()?);
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        Ok(Expr::InList { expr: Box::new(left), list, negated })
    }

    fn parse_comparison(&mut self) -> PResult<Expr> {
        let mut left = self.parse_bitwise()?;
        while let TokenKind::Punct(op @ ("<" | "<=" | ">" | ">=")) = self.peek().kind {
            self.advance();
            let right = self.parse_bitwise()?;
            left = binary(op, left, right);
        }
        Ok(left)
    }

    fn parse_bitwise(&mut self) -> PResult<Expr> {
        let mut left = self.parse_additive()?;
        while let TokenKind::Punct(op @ ("<<" | ">>" | "&" | "|")) = self.peek().kind {
            self.advance();
            let right = self.parse_additive()?;
            left = binary(op, left, right);
        }
        Ok(left)
    }

    fn parse_additive(&mut self) -> PResult<Expr> {
        let mut left = self.parse_multiplicative()?;
        while let TokenKind::Punct(op @ ("+" | "-")) = self.peek().kind {
            self.advance();
            let right = self.parse_multiplicative()?;
            left = binary(op, left, right);
        }
        Ok(left)
    }

    fn parse_multiplicative(&mut self) -> PResult<Expr> {
        let mut left = self.parse_concat()?;
        while let TokenKind::Punct(op @ ("*" | "/" | "%")) = self.peek().kind {
            self.advance();
            let right = self.parse_concat()?;
            left = binary(op, left, right);
        }
        Ok(left)
    }

    fn parse_concat(&mut self) -> PResult<Expr> {
        let mut left = self.parse_unary()?;
        while self.eat_punct("||") {
            let right = self.parse_unary()?;
            left = binary("||", left, right);
        }
        Ok(left)
    }

    fn parse_unary(&mut self) -> PResult<Expr> {
        if let TokenKind::Punct(op @ ("-" | "+" | "~")) = self.peek().kind {
            self.advance();
            let inner = self.parse_unary()?;
            return Ok(Expr::Unary { op: op.to_string(), expr: Box::new(inner) });
        }
        let mut e = self.parse_primary()?;
        while self.eat_keyword("COLLATE") {
            let c = self.parse_ident()?;
            e = Expr::Collate { expr: Box::new(e), collation: c.value };
        }
        Ok(e)
    }

    fn parse_primary(&mut self) -> PResult<Expr> {
        let t = self.peek().clone();
        match &t.kind {
            TokenKind::Number(n) => {
                self.advance();
                Ok(Expr::Literal(Literal::Number(n.clone())))
            }
            TokenKind::Str(s) => {
                self.advance();
                Ok(Expr::Literal(Literal::String(s.clone())))
            }
            TokenKind::Blob(b) => {
                self.advance();
                Ok(Expr::Literal(Literal::Blob(b.clone())))
            }
            TokenKind::Punct("(") => {
                self.advance();
                if self.starts_query() {
                    let q = self.parse_query()?;
                    self.expect_punct(")")?;
                    return Ok(Expr::Subquery(Box::new(q)));
                }
                let mut items = vec![self.parse_expr()?];
                while self.eat_punct(",") {
                    items.push(self.parse_expr()?);
                }
                self.expect_punct(")")?;
                Ok(if items.len() == 1 { items.pop().expect("one item") } else { Expr::Row(items) })
            }
            TokenKind::Word(w) => {
                let upper = w.to_ascii_uppercase();
                match upper.as_str() {
                    "NULL" => {
                        self.advance();
                        Ok(Expr::Literal(Literal::Null))
                    }
                    "CURRENT_DATE" | "CURRENT_TIME" | "CURRENT_TIMESTAMP" => {
                        self.advance();
                        Ok(Expr::Literal(Literal::CurrentTime(upper)))
                    }
                    "CASE" => self.parse_case(),
                    "CAST" => self.parse_cast(),
                    "EXISTS" => {
                        self.advance();
                        self.expect_punct("(")?;
                        let q = self.parse_query()?;
                        self.expect_punct(")")?;
                        Ok(Expr::Exists { subquery: Box::new(q), negated: false })
                    }
                    "SELECT" | "WITH" => Err(self.unsupported(&t, "subquery without parentheses")),
                    "RAISE" => Err(self.unsupported(&t, "RAISE expressions")),
                    _ if self.peek_at(1).is_punct("(") && !is_reserved(w) => self.parse_function(),
                    _ if is_reserved(w) => Err(self.syntax(&t, "unexpected keyword")),
                    _ => self.parse_column_ref(),
                }
            }
            TokenKind::Quoted { .. } => self.parse_column_ref(),
            _ => Err(self.syntax(&t, "expected expression")),
        }
    }

    fn parse_column_ref(&mut self) -> PResult<Expr> {
        let first = self.parse_ident()?;
        if !self.peek().is_punct(".") {
            return Ok(Expr::Column(ColumnRef { qualifier: None, name: first }));
        }
        self.advance();
        let second = self.parse_ident()?;
        if self.eat_punct(".") {
            // schema.table.column
            let third = self.parse_ident()?;
            return Ok(Expr::Column(ColumnRef { qualifier: Some(second), name: third }));
        }
        Ok(Expr::Column(ColumnRef { qualifier: Some(first), name: second }))
    }

    fn parse_function(&mut self) -> PResult<Expr> {
        let name = match self.advance().kind {
            TokenKind::Word(w) => w,
            _ => unreachable!("caller checked for a word"),
        };
        self.expect_punct("(")?;
        let mut distinct = false;
        let mut star = false;
        let mut args = Vec::new();
        if self.eat_punct("*") {
            star = true;
        } else if !self.peek().is_punct(")") {
            distinct = self.eat_keyword("DISTINCT");
            loop {
                args.push(self.parse_expr()?);
                if !self.eat_punct(",") {
                    break;
                }
            }
            let t = self.peek().clone();
            if t.is_keyword("ORDER") {
                return Err(self.unsupported(&t, "ordered aggregate arguments"));
            }
        }
        self.expect_punct(")")?;
        let t = self.peek().clone();
        if t.is_keyword("OVER") {
            return Err(self.unsupported(&t, "window functions"));
        }
        if t.is_keyword("FILTER") {
            return Err(self.unsupported(&t, "aggregate FILTER clauses"));
        }
        Ok(Expr::Function { name, distinct, star, args })
    }

    fn parse_case(&mut self) -> PResult<Expr> {
        self.advance();
        let operand = if self.peek().is_keyword("WHEN") {
            None
        } else {
            Some(Box::new(self.parse_expr()?))
        };
        let mut branches = Vec::new();
        while self.eat_keyword("WHEN") {
            let cond = self.parse_expr()?;
            self.expect_keyword("THEN")?;
            let value = self.parse_expr()?;
            branches.push((cond, value));
        }
        if branches.is_empty() {
            let t = self.peek().clone();
            return Err(self.syntax(&t, "expected WHEN"));
        }
        let otherwise = if self.eat_keyword("ELSE") { Some(Box::new(self.parse_expr()?)) } else { None };
        self.expect_keyword("END")?;
        Ok(Expr::Case { operand, branches, otherwise })
    }

    fn parse_cast(&mut self) -> PResult<Expr> {
        self.advance();
        self.expect_punct("(")?;
        let expr = self.parse_expr()?;
        self.expect_keyword("AS")?;
        let mut words = Vec::new();
        while let TokenKind::Word(w) = &self.peek().kind {
            words.push(w.clone());
            self.advance();
        }
        if words.is_empty() {
            let t = self.peek().clone();
            return Err(self.syntax(&t, "expected type name"));
        }
        let mut type_name = words.join(" ");
        if self.eat_punct("(") {
            let mut sizes = Vec::new();
            loop {
                let t = self.advance();
                match t.kind {
                    TokenKind::Number(n) => sizes.push(n),
                    _ => return Err(self.syntax(&t, "expected type size")),
                }
                if !self.eat_punct(",") {
                    break;
                }
            }
            self.expect_punct(")")?;
            type_name = format!("{type_name}({})", sizes.join(","));
        }
        self.expect_punct(")")?;
        Ok(Expr::Cast { expr: Box::new(expr), type_name })
    }
}

fn binary(op: &str, left: Expr, right: Expr) -> Expr {
    Expr::Binary { op: op.to_string(), left: Box::new(left), right: Box::new(right) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(q: Option<&str>, n: &str) -> ColumnRef {
        ColumnRef { qualifier: q.map(Ident::bare), name: Ident::bare(n) }
    }

    #[test]
    fn simple_select_shape() {
        let ast = parse_sql("SELECT MailStreet FROM schools WHERE CDSCode = '1'").unwrap();
        assert_eq!(ast.from_item_count(), 1);
        let refs: Vec<_> = ast.column_refs().into_iter().cloned().collect();
        assert_eq!(refs, vec![col(None, "MailStreet"), col(None, "CDSCode")]);
        let expected = Query {
            ctes: vec![],
            body: SetExpr::Select(Box::new(Select {
                distinct: false,
                projection: vec![SelectItem::Expr {
                    expr: Expr::Column(col(None, "MailStreet")),
                    alias: None,
                }],
                from: vec![FromItem {
                    base: TableFactor::Table { name: Ident::bare("schools"), alias: None },
                    joins: vec![],
                }],
                selection: Some(Expr::Binary {
                    op: "=".into(),
                    left: Box::new(Expr::Column(col(None, "CDSCode"))),
                    right: Box::new(Expr::Literal(Literal::String("1".into()))),
                }),
                group_by: vec![],
                having: None,
            })),
            order_by: vec![],
            limit: None,
        };
        assert_eq!(ast.query, expected);
    }

    #[test]
    fn select_constant() {
        let ast = parse_sql("SELECT 1").unwrap();
        assert_eq!(ast.from_item_count(), 0);
        assert!(ast.column_refs().is_empty());
    }

    #[test]
    fn delete_is_unsupported() {
        match parse_sql("DELETE FROM schools") {
            Err(LinkError::Unsupported { token, offset, .. }) => {
                assert_eq!(token, "DELETE");
                assert_eq!(offset, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn window_function_is_unsupported() {
        match parse_sql("SELECT RANK() OVER (ORDER BY x) FROM t") {
            Err(LinkError::Unsupported { token, offset, .. }) => {
                assert_eq!(token, "OVER");
                assert_eq!(offset, 14);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn recursive_cte_is_unsupported() {
        assert!(matches!(
            parse_sql("WITH RECURSIVE c(x) AS (SELECT 1) SELECT x FROM c"),
            Err(LinkError::Unsupported { .. })
        ));
    }

    #[test]
    fn trailing_semicolon_and_multiple_statements() {
        assert!(parse_sql("SELECT 1;").is_ok());
        assert!(parse_sql("SELECT 1 ; ;").is_ok());
        assert!(matches!(parse_sql("SELECT 1; SELECT 2"), Err(LinkError::Unsupported { .. })));
    }

    #[test]
    fn broad_grammar_coverage() {
        let queries = [
            "SELECT DISTINCT T1.a, COUNT(DISTINCT T2.b) AS n FROM x AS T1 LEFT JOIN y T2 ON T1.id = T2.id GROUP BY T1.a HAVING COUNT(*) > 1 ORDER BY n DESC LIMIT 5",
            "SELECT CAST(SUM(CASE WHEN a = 1 THEN 1 ELSE 0 END) AS REAL) * 100 / COUNT(*) FROM t",
            "SELECT a FROM t WHERE b IN (SELECT b FROM u) AND c NOT IN (1, 2) AND d BETWEEN 1 AND 5",
            "SELECT a FROM t WHERE name LIKE '%x%' ESCAPE '\\' OR b IS NOT NULL OR c NOTNULL",
            "SELECT a FROM t UNION SELECT b FROM u EXCEPT SELECT c FROM v INTERSECT SELECT d FROM w",
            "WITH c AS (SELECT a FROM t), d(x) AS (SELECT b FROM u) SELECT c.a, d.x FROM c, d",
            "SELECT SUBSTR(a, 1, 4), STRFTIME('%Y', b), IIF(c > 0, 'y', 'n') || '!' FROM t LIMIT 1, 2",
            "SELECT `Free Meal Count (K-12)` / `Enrollment (K-12)` FROM frpm WHERE \"County Name\" = 'Alameda'",
            "SELECT t.a FROM (SELECT a FROM u) AS t WHERE EXISTS (SELECT 1 FROM v WHERE v.a = t.a)",
            "SELECT a FROM t WHERE a = (SELECT MAX(a) FROM t) AND -b < ~c",
            "SELECT a FROM t CROSS JOIN u INNER JOIN v USING (id)",
            "SELECT a COLLATE NOCASE FROM t ORDER BY a NULLS LAST",
            "SELECT a FROM t WHERE (a, b) = (1, 2)",
        ];
        for q in queries {
            parse_sql(q).unwrap_or_else(|e| panic!("{q}: {e}"));
        }
    }

    #[test]
    fn syntax_errors_name_token() {
        match parse_sql("SELECT a FROM WHERE") {
            Err(LinkError::Syntax { token, offset, .. }) => {
                assert_eq!(token, "WHERE");
                assert_eq!(offset, 14);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_sql("").is_err());
        assert!(parse_sql("SELECT a FROM t WHERE").is_err());
    }
}
