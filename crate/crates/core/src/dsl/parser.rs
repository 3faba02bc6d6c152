//! Recursive-descent parser with single-token lookahead. Semantic checks
//! (feature existence, comparison typing, parameter resolution) run during
//! the parse so every error carries a source position.

use super::lexer::{Lexer, Tok};
use super::{
    CmpOp, CondExpr, DslError, EffectExpr, Factor, FeatureKind, FeatureSchema, Literal,
    ParamDecl, ParamRef, Pos, Rule, RuleSet, Term,
};

/// Parses and validates a rule document against `schema`.
///
/// Deterministic: the same source and schema always produce the same AST.
pub fn parse_ruleset(source: &str, schema: &FeatureSchema) -> Result<RuleSet, DslError> {
    let mut parser = Parser::new(source, schema)?;
    let mut rules: Vec<Rule> = Vec::new();
    loop {
        if parser.at_eof() {
            break;
        }
        let (rule, id_pos) = parser.rule()?;
        if rules.iter().any(|r| r.id == rule.id) {
            return Err(DslError::DuplicateRuleId { pos: id_pos, id: rule.id });
        }
        rules.push(rule);
    }
    Ok(RuleSet { rules, schema: schema.clone() })
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    pos: Pos,
    schema: &'a FeatureSchema,
}

impl<'a> Parser<'a> {
    fn new(source: &'a str, schema: &'a FeatureSchema) -> Result<Self, DslError> {
        let mut lexer = Lexer::new(source);
        let (tok, pos) = lexer.next_token()?;
        Ok(Self { lexer, tok, pos, schema })
    }

    fn at_eof(&self) -> bool {
        self.tok == Tok::Eof
    }

    fn advance(&mut self) -> Result<(), DslError> {
        let (tok, pos) = self.lexer.next_token()?;
        self.tok = tok;
        self.pos = pos;
        Ok(())
    }

    fn fail(&self, expected: &str) -> DslError {
        DslError::Syntax {
            pos: self.pos,
            message: format!("expected {}, found {}", expected, self.tok.describe()),
        }
    }

    fn expect(&mut self, want: Tok, expected: &str) -> Result<(), DslError> {
        if self.tok == want {
            self.advance()
        } else {
            Err(self.fail(expected))
        }
    }

    fn keyword(&mut self, kw: &'static str) -> Result<(), DslError> {
        if self.tok == Tok::Keyword(kw) {
            self.advance()
        } else {
            Err(self.fail(&format!("`{kw}`")))
        }
    }

    fn eat_keyword(&mut self, kw: &'static str) -> Result<bool, DslError> {
        if self.tok == Tok::Keyword(kw) {
            self.advance()?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn ident(&mut self, expected: &str) -> Result<(String, Pos), DslError> {
        match &self.tok {
            Tok::Ident(name) => {
                let out = (name.clone(), self.pos);
                self.advance()?;
                Ok(out)
            }
            _ => Err(self.fail(expected)),
        }
    }

    fn number(&mut self) -> Result<f64, DslError> {
        match self.tok {
            Tok::Number(n) => {
                self.advance()?;
                Ok(n)
            }
            _ => Err(self.fail("number")),
        }
    }

    fn rule(&mut self) -> Result<(Rule, Pos), DslError> {
        self.keyword("rule")?;
        let (id, id_pos) = self.ident("rule identifier")?;
        self.expect(Tok::LBrace, "`{`")?;

        let description = if self.eat_keyword("describe")? {
            match &self.tok {
                Tok::Str(text) => {
                    let text = text.clone();
                    self.advance()?;
                    Some(text)
                }
                _ => return Err(self.fail("string literal")),
            }
        } else {
            None
        };

        self.keyword("when")?;
        let condition = self.cond()?;

        self.keyword("effect")?;
        let mut refs: Vec<(String, Pos)> = Vec::new();
        let effect = self.effect(&mut refs)?;

        self.keyword("params")?;
        self.expect(Tok::LBrace, "`{`")?;
        let mut params: Vec<ParamDecl> = Vec::new();
        while self.tok != Tok::RBrace {
            let (decl, decl_pos) = self.pdecl()?;
            if params.iter().any(|p| p.name == decl.name) {
                return Err(DslError::DuplicateParam {
                    pos: decl_pos,
                    rule: id,
                    param: decl.name,
                });
            }
            params.push(decl);
        }
        self.expect(Tok::RBrace, "`}`")?;
        self.expect(Tok::RBrace, "`}`")?;

        for (name, pos) in refs {
            if !params.iter().any(|p| p.name == name) {
                return Err(DslError::UnresolvedParam { pos, rule: id, param: name });
            }
        }

        Ok((Rule { id, description, condition, effect, params }, id_pos))
    }

    fn pdecl(&mut self) -> Result<(ParamDecl, Pos), DslError> {
        let (name, pos) = self.ident("parameter declaration or `}`")?;
        self.expect(Tok::Assign, "`=`")?;
        let init = self.number()?;
        let bounds = if self.eat_keyword("in")? {
            self.expect(Tok::LBracket, "`[`")?;
            let lo = self.number()?;
            self.expect(Tok::Comma, "`,`")?;
            let hi = self.number()?;
            self.expect(Tok::RBracket, "`]`")?;
            if !(lo <= init && init <= hi) {
                return Err(DslError::InitOutOfBounds { pos, param: name, init, lo, hi });
            }
            Some((lo, hi))
        } else {
            None
        };
        let frozen = self.eat_keyword("frozen")?;
        Ok((ParamDecl { name, init, bounds, frozen }, pos))
    }

    fn cond(&mut self) -> Result<CondExpr, DslError> {
        let mut parts = vec![self.conj()?];
        while self.eat_keyword("or")? {
            parts.push(self.conj()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            CondExpr::Any(parts)
        })
    }

    fn conj(&mut self) -> Result<CondExpr, DslError> {
        let mut parts = vec![self.atom()?];
        while self.eat_keyword("and")? {
            parts.push(self.atom()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            CondExpr::All(parts)
        })
    }

    fn atom(&mut self) -> Result<CondExpr, DslError> {
        match self.tok.clone() {
            Tok::Keyword("not") => {
                self.advance()?;
                Ok(CondExpr::Not(Box::new(self.atom()?)))
            }
            Tok::LParen => {
                self.advance()?;
                let inner = self.cond()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Keyword("present") => {
                self.advance()?;
                self.expect(Tok::LParen, "`(`")?;
                let (feature, fpos) = self.ident("feature name")?;
                self.check_feature(&feature, fpos)?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(CondExpr::Present(feature))
            }
            Tok::Ident(_) => {
                let (feature, fpos) = self.ident("feature name")?;
                let kind = self.check_feature(&feature, fpos)?;
                let op = self.cmp_op()?;
                let value = match self.tok.clone() {
                    Tok::Number(n) => {
                        self.advance()?;
                        Literal::Number(n)
                    }
                    Tok::Str(s) => {
                        self.advance()?;
                        Literal::Str(s)
                    }
                    _ => return Err(self.fail("number or string literal")),
                };
                self.check_cmp_types(&feature, kind, op, &value, fpos)?;
                Ok(CondExpr::Cmp { feature, op, value })
            }
            _ => Err(self.fail("condition")),
        }
    }

    fn cmp_op(&mut self) -> Result<CmpOp, DslError> {
        let op = match &self.tok {
            Tok::Cmp("==") => CmpOp::Eq,
            Tok::Cmp("!=") => CmpOp::Ne,
            Tok::Cmp("<") => CmpOp::Lt,
            Tok::Cmp("<=") => CmpOp::Le,
            Tok::Cmp(">") => CmpOp::Gt,
            Tok::Cmp(">=") => CmpOp::Ge,
            _ => return Err(self.fail("comparison operator")),
        };
        self.advance()?;
        Ok(op)
    }

    fn check_feature(&self, name: &str, pos: Pos) -> Result<FeatureKind, DslError> {
        self.schema
            .kind_of(name)
            .ok_or_else(|| DslError::UnknownFeature { pos, feature: name.to_string() })
    }

    fn check_cmp_types(
        &self,
        feature: &str,
        kind: FeatureKind,
        op: CmpOp,
        value: &Literal,
        pos: Pos,
    ) -> Result<(), DslError> {
        match (kind, value) {
            (FeatureKind::Categorical, _) if op.is_ordering() => Err(DslError::TypeMismatch {
                pos,
                message: format!(
                    "ordering comparison `{}` on categorical feature `{feature}`",
                    op.symbol()
                ),
            }),
            (FeatureKind::Numeric, Literal::Str(_)) => Err(DslError::TypeMismatch {
                pos,
                message: format!("numeric feature `{feature}` compared to a string"),
            }),
            (FeatureKind::Categorical, Literal::Number(_)) => Err(DslError::TypeMismatch {
                pos,
                message: format!("categorical feature `{feature}` compared to a number"),
            }),
            _ => Ok(()),
        }
    }

    fn effect(&mut self, refs: &mut Vec<(String, Pos)>) -> Result<EffectExpr, DslError> {
        let mut terms = vec![self.term(refs)?];
        while self.tok == Tok::Plus {
            self.advance()?;
            terms.push(self.term(refs)?);
        }
        Ok(EffectExpr { terms })
    }

    fn term(&mut self, refs: &mut Vec<(String, Pos)>) -> Result<Term, DslError> {
        let mut factors = vec![self.factor(refs)?];
        while self.tok == Tok::Star {
            self.advance()?;
            factors.push(self.factor(refs)?);
        }
        Ok(Term { factors })
    }

    fn factor(&mut self, refs: &mut Vec<(String, Pos)>) -> Result<Factor, DslError> {
        let primitive = match &self.tok {
            Tok::Keyword(k @ ("sigmoid" | "ramp" | "linear" | "gate" | "const")) => *k,
            _ => return Err(self.fail("effect primitive (sigmoid, ramp, linear, gate, const)")),
        };
        let call_pos = self.pos;
        self.advance()?;
        self.expect(Tok::LParen, "`(`")?;

        if primitive == "const" {
            let prefs = self.pref_list(refs)?;
            self.expect(Tok::RParen, "`)`")?;
            let mut prefs = self.check_arity(primitive, 1, prefs, call_pos)?;
            return Ok(Factor::Const { value: prefs.pop().unwrap() });
        }

        if primitive == "gate" {
            let condition = self.cond()?;
            self.expect(Tok::Semi, "`;`")?;
            let prefs = self.pref_list(refs)?;
            self.expect(Tok::RParen, "`)`")?;
            let mut prefs = self.check_arity(primitive, 1, prefs, call_pos)?;
            return Ok(Factor::Gate { condition, value: prefs.pop().unwrap() });
        }

        let (feature, fpos) = self.ident("feature name")?;
        let kind = self.check_feature(&feature, fpos)?;
        if kind != FeatureKind::Numeric {
            return Err(DslError::TypeMismatch {
                pos: fpos,
                message: format!(
                    "`{primitive}` requires a numeric feature, `{feature}` is categorical"
                ),
            });
        }
        self.expect(Tok::Semi, "`;`")?;
        let prefs = self.pref_list(refs)?;
        self.expect(Tok::RParen, "`)`")?;

        Ok(match primitive {
            "sigmoid" => {
                let mut p = self.check_arity(primitive, 3, prefs, call_pos)?;
                let smoothness = p.pop().unwrap();
                let threshold = p.pop().unwrap();
                let scale = p.pop().unwrap();
                Factor::Sigmoid { feature, scale, threshold, smoothness }
            }
            "ramp" => {
                let mut p = self.check_arity(primitive, 2, prefs, call_pos)?;
                let threshold = p.pop().unwrap();
                let slope = p.pop().unwrap();
                Factor::Ramp { feature, slope, threshold }
            }
            "linear" => {
                let mut p = self.check_arity(primitive, 2, prefs, call_pos)?;
                let offset = p.pop().unwrap();
                let weight = p.pop().unwrap();
                Factor::Linear { feature, weight, offset }
            }
            _ => unreachable!(),
        })
    }

    fn pref_list(&mut self, refs: &mut Vec<(String, Pos)>) -> Result<Vec<ParamRef>, DslError> {
        let mut out = Vec::new();
        let (first, fpos) = self.ident("parameter reference")?;
        refs.push((first.clone(), fpos));
        out.push(ParamRef(first));
        while self.tok == Tok::Comma {
            self.advance()?;
            let (next, npos) = self.ident("parameter reference")?;
            refs.push((next.clone(), npos));
            out.push(ParamRef(next));
        }
        Ok(out)
    }

    fn check_arity(
        &self,
        primitive: &'static str,
        expected: usize,
        prefs: Vec<ParamRef>,
        pos: Pos,
    ) -> Result<Vec<ParamRef>, DslError> {
        if prefs.len() != expected {
            Err(DslError::Arity { pos, primitive, expected, found: prefs.len() })
        } else {
            Ok(prefs)
        }
    }
}
