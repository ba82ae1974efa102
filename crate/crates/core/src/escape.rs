//! Escaping of single characters and strings for line-oriented text files.

/// Escapes a character for line-oriented text files: `\n`, `\t`, `\\`,
/// `\r`, and `\uXXXX` for other control characters.
pub fn escape_char(c: char) -> String {
    match c {
        '\n' => "\\n".into(),
        '\t' => "\\t".into(),
        '\r' => "\\r".into(),
        '\\' => "\\\\".into(),
        c if c.is_control() => format!("\\u{:04X}", c as u32),
        c => c.to_string(),
    }
}

/// Inverse of [`escape_char`]; `None` if `s` is not exactly one escaped char.
pub fn unescape_char(s: &str) -> Option<char> {
    let mut chars = s.chars();
    let first = chars.next()?;
    if first != '\\' {
        return if chars.next().is_none() { Some(first) } else { None };
    }
    let c = match chars.next()? {
        'n' => '\n',
        't' => '\t',
        'r' => '\r',
        '\\' => '\\',
        'u' => {
            let hex: String = chars.by_ref().collect();
            if hex.is_empty() || hex.len() > 6 {
                return None;
            }
            return u32::from_str_radix(&hex, 16).ok().and_then(char::from_u32);
        }
        _ => return None,
    };
    if chars.next().is_some() {
        return None;
    }
    Some(c)
}

/// Escapes every character of `s` with [`escape_char`].
pub fn escape_str(s: &str) -> String {
    s.chars().map(escape_char).collect()
}

/// Inverse of [`escape_str`]. `\uXXXX` escapes take exactly four hex digits.
pub fn unescape_str(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        let c = match chars.next()? {
            'n' => '\n',
            't' => '\t',
            'r' => '\r',
            '\\' => '\\',
            'u' => {
                let hex: String = chars.by_ref().take(4).collect();
                if hex.len() != 4 {
                    return None;
                }
                u32::from_str_radix(&hex, 16).ok().and_then(char::from_u32)?
            }
            _ => return None,
        };
        out.push(c);
    }
    Some(out)
}
