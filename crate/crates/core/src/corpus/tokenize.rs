//! Line-level tokenizers for Python statements and their English descriptions.

/// Placeholder emitted for numeric literals in code.
pub const NUM_TOKEN: &str = "<NUM>";
/// Placeholder emitted for string literals in code.
pub const STR_TOKEN: &str = "<STR>";

const STRING_PREFIXES: &[&str] = &["r", "b", "u", "f", "rb", "br", "fr", "rf"];

// Longest first.
const OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "**", "//", "==", "!=", "<>", "<=", ">=", "+=", "-=",
    "*=", "/=", "%=", "&=", "|=", "^=", "@=", "->", "<<", ">>", ":=",
];

/// Tokenizes one line of Python source.
///
/// Identifiers are lowercased and split on `_`, numeric literals become
/// [`NUM_TOKEN`], quoted string literals become [`STR_TOKEN`], operators and
/// punctuation are standalone tokens. Feeding the space-joined output back
/// in yields the same tokens.
pub fn preprocess_code(line: &str) -> Vec<String> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if starts_with(&chars, i, NUM_TOKEN) || starts_with(&chars, i, STR_TOKEN) {
            let tag = if starts_with(&chars, i, NUM_TOKEN) { NUM_TOKEN } else { STR_TOKEN };
            out.push(tag.to_string());
            i += tag.len();
        } else if c == '\'' || c == '"' {
            i = skip_string(&chars, i);
            out.push(STR_TOKEN.to_string());
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            if i < chars.len()
                && (chars[i] == '\'' || chars[i] == '"')
                && STRING_PREFIXES.contains(&word.to_lowercase().as_str())
            {
                i = skip_string(&chars, i);
                out.push(STR_TOKEN.to_string());
            } else {
                push_identifier(&word, &mut out);
            }
        } else if c.is_ascii_digit()
            || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) && !follows_operand(&chars, i))
        {
            i = skip_number(&chars, i);
            out.push(NUM_TOKEN.to_string());
        } else if let Some(op) = OPERATORS.iter().find(|op| starts_with(&chars, i, op)) {
            out.push((*op).to_string());
            i += op.chars().count();
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Tokenizes one line of pseudo-code: lowercase, whitespace split, trailing
/// punctuation detached into its own tokens.
pub fn preprocess_pseudo(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.to_lowercase().split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut end = chars.len();
        while end > 1 && is_trailing_punct(chars[end - 1]) {
            end -= 1;
        }
        if end == chars.len() || chars[..end].iter().all(|&c| is_trailing_punct(c)) {
            out.push(word.to_string());
            continue;
        }
        out.push(chars[..end].iter().collect());
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

fn is_trailing_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ':' | ';' | '!' | '?')
}

fn push_identifier(word: &str, out: &mut Vec<String>) {
    let before = out.len();
    for part in word.split('_').filter(|p| !p.is_empty()) {
        let digits = part.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            out.push(NUM_TOKEN.to_string());
        }
        if digits < part.len() {
            out.push(part[digits..].to_lowercase());
        }
    }
    if out.len() == before {
        // A bare underscore run such as `_` or `__`.
        out.push("_".to_string());
    }
}

fn starts_with(chars: &[char], at: usize, pat: &str) -> bool {
    let mut j = at;
    for p in pat.chars() {
        if chars.get(j) != Some(&p) {
            return false;
        }
        j += 1;
    }
    true
}

/// Whether the character before `i` ends an operand (so `.` is attribute access).
fn follows_operand(chars: &[char], i: usize) -> bool {
    chars[..i]
        .iter()
        .rev()
        .find(|c| !c.is_whitespace())
        .is_some_and(|&c| c.is_alphanumeric() || c == '_' || c == ')' || c == ']')
}

/// Returns the index just past a string literal starting at `i` (a quote).
/// Unterminated strings run to the end of the line.
fn skip_string(chars: &[char], i: usize) -> usize {
    let q = chars[i];
    let triple = chars.get(i + 1) == Some(&q) && chars.get(i + 2) == Some(&q);
    let mut j = if triple { i + 3 } else { i + 1 };
    while j < chars.len() {
        match chars[j] {
            '\\' => j += 2,
            c if c == q => {
                if !triple {
                    return j + 1;
                }
                if chars.get(j + 1) == Some(&q) && chars.get(j + 2) == Some(&q) {
                    return j + 3;
                }
                j += 1;
            }
            _ => j += 1,
        }
    }
    chars.len()
}

/// Returns the index just past an integer, float, hex, octal or binary literal.
fn skip_number(chars: &[char], i: usize) -> usize {
    let mut j = i;
    let radix_prefix = chars[i] == '0'
        && chars
            .get(i + 1)
            .is_some_and(|c| matches!(c, 'x' | 'X' | 'o' | 'O' | 'b' | 'B'))
        && chars.get(i + 2).is_some_and(|c| c.is_ascii_hexdigit());
    if radix_prefix {
        j += 2;
        while j < chars.len() && (chars[j].is_ascii_hexdigit() || chars[j] == '_') {
            j += 1;
        }
    } else {
        let digits = |j: &mut usize| {
            while *j < chars.len() && (chars[*j].is_ascii_digit() || chars[*j] == '_') {
                *j += 1;
            }
        };
        digits(&mut j);
        if chars.get(j) == Some(&'.') && !chars.get(j + 1).is_some_and(|c| c.is_alphabetic() && *c != 'e' && *c != 'E') {
            j += 1;
            digits(&mut j);
        }
        if chars.get(j).is_some_and(|c| matches!(c, 'e' | 'E')) {
            let mut k = j + 1;
            if chars.get(k).is_some_and(|c| matches!(c, '+' | '-')) {
                k += 1;
            }
            if chars.get(k).is_some_and(|c| c.is_ascii_digit()) {
                j = k;
                digits(&mut j);
            }
        }
    }
    if chars.get(j).is_some_and(|c| matches!(c, 'j' | 'J' | 'l' | 'L')) {
        j += 1;
    }
    j
}
