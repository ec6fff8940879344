use super::{PlatformError, Result};

/// Expands a compressed host list such as `nid[00001-00003,00007],login1` or
/// Cobalt's bare numeric form `1-3,7`. Zero padding is kept.
pub fn expand_hostlist(list: &str) -> Result<Vec<String>> {
    let bad = || PlatformError::BadNodeList(list.to_string());
    let mut out = Vec::new();
    for item in split_top_level(list).map_err(|_| bad())? {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        match item.find('[') {
            Some(open) => {
                let close = item.rfind(']').ok_or_else(bad)?;
                if close < open {
                    return Err(bad());
                }
                let prefix = &item[..open];
                let suffix = &item[close + 1..];
                for part in item[open + 1..close].split(',') {
                    for n in expand_range(part).ok_or_else(bad)? {
                        out.push(format!("{prefix}{n}{suffix}"));
                    }
                }
            }
            None if item.bytes().next().is_some_and(|b| b.is_ascii_digit()) => {
                out.extend(expand_range(item).ok_or_else(bad)?);
            }
            None => out.push(item.to_string()),
        }
    }
    Ok(out)
}

/// Splits on commas that are not inside brackets.
fn split_top_level(s: &str) -> std::result::Result<Vec<&str>, ()> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth < 0 {
                    return Err(());
                }
            }
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(());
    }
    parts.push(&s[start..]);
    Ok(parts)
}

fn expand_range(part: &str) -> Option<Vec<String>> {
    let part = part.trim();
    let (lo, hi) = part.split_once('-').unwrap_or((part, part));
    if lo.is_empty() || !lo.bytes().all(|b| b.is_ascii_digit()) || !hi.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let width = lo.len();
    let (a, b): (u64, u64) = (lo.parse().ok()?, hi.parse().ok()?);
    if b < a || b - a > 1_000_000 {
        return None;
    }
    Some((a..=b).map(|n| format!("{n:0width$}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bracket_ranges() {
        assert_eq!(
            expand_hostlist("nid[00001-00003,00007]").unwrap(),
            ["nid00001", "nid00002", "nid00003", "nid00007"]
        );
        assert_eq!(
            expand_hostlist("a[1-2]b,login1").unwrap(),
            ["a1b", "a2b", "login1"]
        );
    }

    #[test]
    fn cobalt_numeric() {
        assert_eq!(expand_hostlist("1-3,7").unwrap(), ["1", "2", "3", "7"]);
        let big = expand_hostlist("0-127").unwrap();
        assert_eq!(big.len(), 128);
    }

    #[test]
    fn malformed() {
        for bad in ["n[1-", "n]1[", "n[3-1]", "n[a-b]"] {
            assert!(expand_hostlist(bad).is_err(), "{bad}");
        }
        assert!(expand_hostlist("").unwrap().is_empty());
    }
}
