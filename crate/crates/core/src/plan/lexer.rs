//! Tokenizer for plan source. `#` starts a comment that runs to end of line.

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Word(String),
    Str(String),
    Int(i64),
    Real(f64),
    Semi,
    Comma,
    Eq,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("`{w}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::Int(_) | Tok::Real(_) => "number".into(),
            Tok::Semi => "`;`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eq => "`=`".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) struct Pos {
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub pos: Pos,
}

#[derive(Debug)]
pub(crate) struct LexError {
    pub pos: Pos,
    pub message: String,
}

pub(crate) fn tokenize(src: &str) -> (Vec<Token>, Vec<LexError>) {
    let mut lx = Lexer { chars: src.chars().collect(), i: 0, line: 1, col: 1 };
    let mut tokens = Vec::new();
    let mut errors = Vec::new();
    while let Some(c) = lx.peek() {
        let pos = lx.pos();
        match c {
            c if c.is_whitespace() => {
                lx.bump();
            }
            '#' => {
                while let Some(c) = lx.peek() {
                    if c == '\n' {
                        break;
                    }
                    lx.bump();
                }
            }
            ';' => {
                lx.bump();
                tokens.push(Token { tok: Tok::Semi, pos });
            }
            ',' => {
                lx.bump();
                tokens.push(Token { tok: Tok::Comma, pos });
            }
            '=' => {
                lx.bump();
                tokens.push(Token { tok: Tok::Eq, pos });
            }
            '"' => match lx.string() {
                Ok(s) => tokens.push(Token { tok: Tok::Str(s), pos }),
                Err(message) => errors.push(LexError { pos, message }),
            },
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => match lx.number() {
                Ok(tok) => tokens.push(Token { tok, pos }),
                Err(message) => errors.push(LexError { pos, message }),
            },
            c if c.is_alphabetic() || c == '_' => {
                let mut w = String::new();
                while let Some(c) = lx.peek() {
                    if c.is_alphanumeric() || c == '_' {
                        w.push(c);
                        lx.bump();
                    } else {
                        break;
                    }
                }
                tokens.push(Token { tok: Tok::Word(w), pos });
            }
            other => {
                lx.bump();
                errors.push(LexError { pos, message: format!("unexpected character `{other}`") });
            }
        }
    }
    (tokens, errors)
}

struct Lexer {
    chars: Vec<char>,
    i: usize,
    line: usize,
    col: usize,
}

impl Lexer {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.i).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.chars.get(self.i + offset).copied()
    }

    fn pos(&self) -> Pos {
        Pos { line: self.line, column: self.col }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.i += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn string(&mut self) -> Result<String, String> {
        self.bump();
        let mut s = String::new();
        loop {
            match self.bump() {
                None | Some('\n') => return Err("unterminated string literal".into()),
                Some('"') => return Ok(s),
                Some('\\') => match self.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    Some(other) => return Err(format!("unknown escape `\\{other}` in string literal")),
                    None => return Err("unterminated string literal".into()),
                },
                Some(c) => s.push(c),
            }
        }
    }

    fn number(&mut self) -> Result<Tok, String> {
        let mut text = String::new();
        if matches!(self.peek(), Some('-' | '+')) {
            text.push(self.bump().unwrap());
        }
        let mut is_real = false;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                text.push(c);
                self.bump();
            } else if c == '.' {
                is_real = true;
                text.push(c);
                self.bump();
            } else if (c == 'e' || c == 'E')
                && (self.peek_at(1).is_some_and(|d| d.is_ascii_digit())
                    || (matches!(self.peek_at(1), Some('-' | '+'))
                        && self.peek_at(2).is_some_and(|d| d.is_ascii_digit())))
            {
                is_real = true;
                text.push(c);
                self.bump();
                if matches!(self.peek(), Some('-' | '+')) {
                    text.push(self.bump().unwrap());
                }
            } else {
                break;
            }
        }
        let bad = || format!("malformed number `{text}`");
        if !text.chars().any(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        if is_real {
            text.parse::<f64>().map(Tok::Real).map_err(|_| bad())
        } else {
            text.parse::<i64>().map(Tok::Int).map_err(|_| bad())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_declaration() {
        let (toks, errs) = tokenize("parameter x real range from -1.5 to 2e1 step 0.5; # trailing");
        assert!(errs.is_empty());
        let kinds: Vec<_> = toks.into_iter().map(|t| t.tok).collect();
        assert_eq!(kinds[5], Tok::Real(-1.5));
        assert_eq!(kinds[7], Tok::Real(20.0));
        assert_eq!(kinds.last(), Some(&Tok::Semi));
    }

    #[test]
    fn positions_are_one_based() {
        let (toks, _) = tokenize("a\n  b");
        assert_eq!(toks[1].pos, Pos { line: 2, column: 3 });
    }

    #[test]
    fn reports_unterminated_string() {
        let (_, errs) = tokenize("execute \"oops\n");
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].pos, Pos { line: 1, column: 9 });
    }
}
