// Copyright 2026 The Ephemera Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! The split query language: a client statement executed on each device and
//! a server statement describing the cross-device aggregation.
//!
//! ```text
//! SELECT region, privacy_time_unit, SUM(trip_distance) AS user_trip_distance
//! FROM DeviceDataStream
//! GROUP BY region, privacy_time_unit;
//!
//! SELECT region, privacy_time_unit, SUM(user_trip_distance)
//! FROM UserResults
//! GROUP BY region, privacy_time_unit;
//! ```
//!
//! Keywords are case-insensitive, identifiers are case-sensitive. Only
//! `SUM` aggregates exist, and the server statement must aggregate.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aggcore::AggCoreConfig;
use crate::time::WindowAlignment;

/// Column every client statement must group by.
pub const PRIVACY_TIME_UNIT: &str = "privacy_time_unit";
/// Virtual table holding the union of all client results.
pub const CLIENT_RESULTS_TABLE: &str = "UserResults";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum QueryError {
    #[error("{pos}: syntax error: {message}")]
    Syntax { pos: Position, message: String },
    #[error("{pos}: UnsupportedAggregate: {name} (only SUM is allowed)")]
    UnsupportedAggregate { pos: Position, name: String },
    #[error("{pos}: NonAggregatingQuery: the server statement must SUM and GROUP BY")]
    NonAggregatingQuery { pos: Position },
    #[error("MissingPrivacyTimeUnit: the client statement must group by {PRIVACY_TIME_UNIT}")]
    MissingPrivacyTimeUnit,
    #[error("UnknownColumn: {0}")]
    UnknownColumn(String),
    #[error("EmptyServerAggregation: the server statement has no group keys or no sums")]
    EmptyServerAggregation,
    #[error("UngroupedColumn: {0} is selected but not grouped")]
    UngroupedColumn(String),
    #[error("NotAnAggregate: {0} is not a client aggregate and cannot be summed")]
    NotAnAggregate(String),
    #[error("UnknownTable: server statement must read from {CLIENT_RESULTS_TABLE}, found {0}")]
    UnknownTable(String),
    #[error("DuplicateColumn: {0}")]
    DuplicateColumn(String),
}

impl QueryError {
    /// Short class name used in diagnostics and tests.
    pub fn class(&self) -> &'static str {
        match self {
            QueryError::Syntax { .. } => "SyntaxError",
            QueryError::UnsupportedAggregate { .. } => "UnsupportedAggregate",
            QueryError::NonAggregatingQuery { .. } => "NonAggregatingQuery",
            QueryError::MissingPrivacyTimeUnit => "MissingPrivacyTimeUnit",
            QueryError::UnknownColumn(_) => "UnknownColumn",
            QueryError::EmptyServerAggregation => "EmptyServerAggregation",
            QueryError::UngroupedColumn(_) => "UngroupedColumn",
            QueryError::NotAnAggregate(_) => "NotAnAggregate",
            QueryError::UnknownTable(_) => "UnknownTable",
            QueryError::DuplicateColumn(_) => "DuplicateColumn",
        }
    }
}

/// One or more violations found while parsing or validating.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("{}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))]
pub struct Diagnostics(pub Vec<QueryError>);

impl Diagnostics {
    pub fn classes(&self) -> Vec<&'static str> {
        self.0.iter().map(QueryError::class).collect()
    }
}

impl From<QueryError> for Diagnostics {
    fn from(e: QueryError) -> Self {
        Diagnostics(vec![e])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SumAggregate {
    pub input: String,
    pub alias: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientQueryPlan {
    /// Plain columns in the select list, in declared order.
    pub selected_group_keys: Vec<String>,
    pub aggregates: Vec<SumAggregate>,
    pub source_stream: String,
    /// Full GROUP BY list; may contain columns that are not selected.
    pub group_by: Vec<String>,
}

impl ClientQueryPlan {
    /// Columns visible to the server statement: selected keys, then aliases.
    pub fn output_columns(&self) -> impl Iterator<Item = &str> {
        self.selected_group_keys
            .iter()
            .map(String::as_str)
            .chain(self.aggregates.iter().map(|a| a.alias.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerAggPlan {
    pub group_keys: Vec<String>,
    /// Client aliases summed across devices, in declared order.
    pub sum_columns: Vec<String>,
    /// Optional output names for the sums.
    pub sum_aliases: Vec<Option<String>>,
    /// Plain columns in the select list.
    pub selected_keys: Vec<String>,
    pub source: String,
}

/// A parsed and structurally validated client/server pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitQuery {
    pub client: ClientQueryPlan,
    pub server: ServerAggPlan,
}

/// Everything the federated server needs to run a query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query: SplitQuery,
    pub window_alignment: WindowAlignment,
    pub grace_period_s: i64,
    pub min_contributions: u64,
    /// Name of the mechanism block in the experiment config.
    pub mechanism: String,
}

impl QuerySpec {
    pub fn to_agg_config(&self) -> AggCoreConfig {
        to_agg_config(&self.query, self.min_contributions)
    }
}

/// Key columns, value columns and threshold for the aggregation core.
pub fn to_agg_config(query: &SplitQuery, min_contributions: u64) -> AggCoreConfig {
    AggCoreConfig {
        key_columns: query.server.group_keys.clone(),
        value_columns: query.server.sum_columns.clone(),
        min_contributions,
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Comma,
    LParen,
    RParen,
    Semicolon,
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    pos: Position,
}

fn lex(text: &str) -> Result<Vec<Token>, QueryError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut column) = (1usize, 1usize);
    while let Some(&c) = chars.peek() {
        let pos = Position { line, column };
        let mut bump = |chars: &mut std::iter::Peekable<std::str::Chars>| {
            let c = chars.next().unwrap();
            if c == '\n' {
                line += 1;
                column = 1;
            } else {
                column += 1;
            }
            c
        };
        match c {
            c if c.is_whitespace() => {
                bump(&mut chars);
            }
            '-' => {
                bump(&mut chars);
                if chars.peek() == Some(&'-') {
                    while chars.peek().is_some_and(|c| *c != '\n') {
                        bump(&mut chars);
                    }
                } else {
                    return Err(QueryError::Syntax { pos, message: "unexpected '-'".into() });
                }
            }
            ',' | '(' | ')' | ';' => {
                bump(&mut chars);
                let tok = match c {
                    ',' => Tok::Comma,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    _ => Tok::Semicolon,
                };
                out.push(Token { tok, pos });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut ident = String::new();
                while chars.peek().is_some_and(|c| c.is_ascii_alphanumeric() || *c == '_') {
                    ident.push(bump(&mut chars));
                }
                out.push(Token { tok: Tok::Ident(ident), pos });
            }
            other => {
                return Err(QueryError::Syntax { pos, message: format!("unexpected character {other:?}") });
            }
        }
    }
    out.push(Token { tok: Tok::Eof, pos: Position { line, column } });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

const KEYWORDS: [&str; 5] = ["SELECT", "FROM", "GROUP", "BY", "AS"];

fn is_keyword(s: &str) -> bool {
    KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(s))
}

#[derive(Debug)]
enum SelectItem {
    Column(String),
    Sum { input: String, alias: Option<String> },
}

#[derive(Debug)]
struct Statement {
    start: Position,
    items: Vec<SelectItem>,
    from: String,
    group_by: Option<Vec<String>>,
}

struct Parser {
    tokens: Vec<Token>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.at]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.at].clone();
        if t.tok != Tok::Eof {
            self.at += 1;
        }
        t
    }

    fn syntax<T>(&self, message: impl Into<String>) -> Result<T, QueryError> {
        Err(QueryError::Syntax { pos: self.peek().pos, message: message.into() })
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.peek_keyword(kw) {
            self.next();
            Ok(())
        } else {
            self.syntax(format!("expected {kw}, found {}", describe(&self.peek().tok)))
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), QueryError> {
        if self.peek().tok == tok {
            self.next();
            Ok(())
        } else {
            self.syntax(format!("expected {what}, found {}", describe(&self.peek().tok)))
        }
    }

    fn ident(&mut self) -> Result<String, QueryError> {
        match &self.peek().tok {
            Tok::Ident(s) if !is_keyword(s) => {
                let s = s.clone();
                self.next();
                Ok(s)
            }
            other => {
                let found = describe(other);
                self.syntax(format!("expected identifier, found {found}"))
            }
        }
    }

    fn ident_list(&mut self) -> Result<Vec<String>, QueryError> {
        let mut out = vec![self.ident()?];
        while self.peek().tok == Tok::Comma {
            self.next();
            out.push(self.ident()?);
        }
        Ok(out)
    }

    fn select_item(&mut self) -> Result<SelectItem, QueryError> {
        let pos = self.peek().pos;
        let name = self.ident()?;
        if self.peek().tok != Tok::LParen {
            return Ok(SelectItem::Column(name));
        }
        if !name.eq_ignore_ascii_case("SUM") {
            return Err(QueryError::UnsupportedAggregate { pos, name });
        }
        self.next();
        let input = self.ident()?;
        self.expect(Tok::RParen, "')'")?;
        let alias = if self.peek_keyword("AS") {
            self.next();
            Some(self.ident()?)
        } else {
            None
        };
        Ok(SelectItem::Sum { input, alias })
    }

    fn statement(&mut self) -> Result<Statement, QueryError> {
        let start = self.peek().pos;
        self.keyword("SELECT")?;
        let mut items = vec![self.select_item()?];
        while self.peek().tok == Tok::Comma {
            self.next();
            items.push(self.select_item()?);
        }
        self.keyword("FROM")?;
        let from = self.ident()?;
        let group_by = if self.peek_keyword("GROUP") {
            self.next();
            self.keyword("BY")?;
            Some(self.ident_list()?)
        } else {
            None
        };
        self.expect(Tok::Semicolon, "';'")?;
        Ok(Statement { start, items, from, group_by })
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Comma => "','".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::Semicolon => "';'".into(),
        Tok::Eof => "end of input".into(),
    }
}

/// Parses the two-statement text into client and server plans. Structural
/// validation of the pair is left to [`validate_split`].
pub fn parse_query(text: &str) -> Result<(ClientQueryPlan, ServerAggPlan), QueryError> {
    let mut p = Parser { tokens: lex(text)?, at: 0 };
    let client_stmt = p.statement()?;
    let server_stmt = p.statement()?;
    if p.peek().tok != Tok::Eof {
        return p.syntax(format!("expected end of input, found {}", describe(&p.peek().tok)));
    }

    let mut client = ClientQueryPlan {
        selected_group_keys: Vec::new(),
        aggregates: Vec::new(),
        source_stream: client_stmt.from,
        group_by: client_stmt.group_by.unwrap_or_default(),
    };
    for item in client_stmt.items {
        match item {
            SelectItem::Column(c) => client.selected_group_keys.push(c),
            SelectItem::Sum { input, alias } => {
                let alias = alias.unwrap_or_else(|| format!("sum_{input}"));
                client.aggregates.push(SumAggregate { input, alias });
            }
        }
    }

    let server_pos = server_stmt.start;
    let has_sum = server_stmt.items.iter().any(|i| matches!(i, SelectItem::Sum { .. }));
    let Some(group_keys) = server_stmt.group_by.filter(|_| has_sum) else {
        return Err(QueryError::NonAggregatingQuery { pos: server_pos });
    };
    let mut server = ServerAggPlan {
        group_keys,
        sum_columns: Vec::new(),
        sum_aliases: Vec::new(),
        selected_keys: Vec::new(),
        source: server_stmt.from,
    };
    for item in server_stmt.items {
        match item {
            SelectItem::Column(c) => server.selected_keys.push(c),
            SelectItem::Sum { input, alias } => {
                server.sum_columns.push(input);
                server.sum_aliases.push(alias);
            }
        }
    }
    Ok((client, server))
}

fn duplicates<'a>(names: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dup = Vec::new();
    for n in names {
        if !seen.insert(n) && !dup.iter().any(|d| d == n) {
            dup.push(n.to_string());
        }
    }
    dup
}

/// Checks the structural rules of a client/server pair and reports every
/// violation found.
pub fn validate_split(client: ClientQueryPlan, server: ServerAggPlan) -> Result<SplitQuery, Diagnostics> {
    let mut errors = Vec::new();

    if client.aggregates.is_empty() {
        errors.push(QueryError::NonAggregatingQuery { pos: Position { line: 1, column: 1 } });
    }
    if !client.group_by.iter().any(|k| k == PRIVACY_TIME_UNIT)
        || !client.selected_group_keys.iter().any(|k| k == PRIVACY_TIME_UNIT)
    {
        errors.push(QueryError::MissingPrivacyTimeUnit);
    }
    for key in &client.selected_group_keys {
        if !client.group_by.contains(key) {
            errors.push(QueryError::UngroupedColumn(key.clone()));
        }
    }
    for d in duplicates(client.output_columns()) {
        errors.push(QueryError::DuplicateColumn(d));
    }

    if server.source != CLIENT_RESULTS_TABLE {
        errors.push(QueryError::UnknownTable(server.source.clone()));
    }
    if server.group_keys.is_empty() || server.sum_columns.is_empty() {
        errors.push(QueryError::EmptyServerAggregation);
    }
    let client_keys: BTreeSet<&str> = client.selected_group_keys.iter().map(String::as_str).collect();
    let client_aliases: BTreeSet<&str> = client.aggregates.iter().map(|a| a.alias.as_str()).collect();
    for key in &server.group_keys {
        if client_aliases.contains(key.as_str()) {
            errors.push(QueryError::UngroupedColumn(key.clone()));
        } else if !client_keys.contains(key.as_str()) {
            errors.push(QueryError::UnknownColumn(key.clone()));
        }
    }
    for key in &server.selected_keys {
        if !server.group_keys.contains(key) {
            errors.push(QueryError::UngroupedColumn(key.clone()));
        }
    }
    for col in &server.sum_columns {
        if client_keys.contains(col.as_str()) {
            errors.push(QueryError::NotAnAggregate(col.clone()));
        } else if !client_aliases.contains(col.as_str()) {
            errors.push(QueryError::UnknownColumn(col.clone()));
        }
    }
    for d in duplicates(server.group_keys.iter().map(String::as_str)) {
        errors.push(QueryError::DuplicateColumn(d));
    }

    if errors.is_empty() {
        Ok(SplitQuery { client, server })
    } else {
        Err(Diagnostics(errors))
    }
}

/// Parse and validate in one step.
pub fn parse_and_validate(text: &str) -> Result<SplitQuery, Diagnostics> {
    let (client, server) = parse_query(text)?;
    validate_split(client, server)
}

/// The on-device trip table the client statement reads from.
pub const DEVICE_STREAM: &str = "DeviceDataStream";
/// Stream columns usable as group keys.
pub const GROUPABLE_COLUMNS: [&str; 4] = ["activity", "region", "direction", PRIVACY_TIME_UNIT];
/// Stream columns usable inside SUM, in metric order.
pub const SUMMABLE_COLUMNS: [&str; 3] = ["trip_count", "trip_distance", "trip_duration"];

/// Checks the client statement against the trip stream's columns.
pub fn validate_against_stream(query: &SplitQuery) -> Result<(), Diagnostics> {
    let client = &query.client;
    let mut errors = Vec::new();
    if client.source_stream != DEVICE_STREAM {
        errors.push(QueryError::UnknownTable(client.source_stream.clone()));
    }
    for key in &client.group_by {
        if SUMMABLE_COLUMNS.contains(&key.as_str()) {
            errors.push(QueryError::UngroupedColumn(key.clone()));
        } else if !GROUPABLE_COLUMNS.contains(&key.as_str()) {
            errors.push(QueryError::UnknownColumn(key.clone()));
        }
    }
    for agg in &client.aggregates {
        if GROUPABLE_COLUMNS.contains(&agg.input.as_str()) {
            errors.push(QueryError::NotAnAggregate(agg.input.clone()));
        } else if !SUMMABLE_COLUMNS.contains(&agg.input.as_str()) {
            errors.push(QueryError::UnknownColumn(agg.input.clone()));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Diagnostics(errors))
    }
}

/// Parse, validate the split, and check the client side against the trip
/// stream. This is the gate used for task registration.
pub fn parse_for_device_stream(text: &str) -> Result<SplitQuery, Diagnostics> {
    let (client, server) = parse_query(text)?;
    let (split, mut errors) = match validate_split(client.clone(), server.clone()) {
        Ok(q) => (q, Vec::new()),
        Err(d) => (SplitQuery { client, server }, d.0),
    };
    if let Err(d) = validate_against_stream(&split) {
        errors.extend(d.0);
    }
    if errors.is_empty() {
        Ok(split)
    } else {
        Err(Diagnostics(errors))
    }
}

impl fmt::Display for ClientQueryPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut items: Vec<String> = self.selected_group_keys.clone();
        items.extend(self.aggregates.iter().map(|a| format!("SUM({}) AS {}", a.input, a.alias)));
        write!(f, "SELECT\n  {}\nFROM {}", items.join(",\n  "), self.source_stream)?;
        if !self.group_by.is_empty() {
            write!(f, "\nGROUP BY\n  {}", self.group_by.join(",\n  "))?;
        }
        write!(f, ";")
    }
}

impl fmt::Display for ServerAggPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut items: Vec<String> = self.selected_keys.clone();
        for (col, alias) in self.sum_columns.iter().zip(&self.sum_aliases) {
            match alias {
                Some(a) => items.push(format!("SUM({col}) AS {a}")),
                None => items.push(format!("SUM({col})")),
            }
        }
        write!(
            f,
            "SELECT\n  {}\nFROM {}\nGROUP BY\n  {};",
            items.join(",\n  "),
            self.source,
            self.group_keys.join(",\n  ")
        )
    }
}

impl fmt::Display for SplitQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\n\n{}\n", self.client, self.server)
    }
}

/// The region/distance example used throughout the documentation.
pub const EXAMPLE_QUERY: &str = "\
SELECT
  region,
  privacy_time_unit,
  SUM(trip_distance) AS user_trip_distance
FROM DeviceDataStream
GROUP BY
  region,
  privacy_time_unit;

SELECT
  region,
  privacy_time_unit,
  SUM(user_trip_distance)
FROM UserResults
GROUP BY region, privacy_time_unit;
";
