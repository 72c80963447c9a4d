//! Unified-diff hunks: parsing, serialization, reconstruction of both sides
//! and a line-level LCS diff.
//!
//! ```text
//! --- a/src/lib.rs
//! +++ b/src/lib.rs
//! @@ -1,3 +1,4 @@
//!  fn main() {
//! +    init();
//!      run();
//!  }
//! ```

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiffError {
    #[error("malformed hunk header at line {line}: {header:?}")]
    MalformedHeader { line: usize, header: String },
    #[error("hunk starting at line {line} declares -{old_count} +{new_count} but its body disagrees")]
    CountMismatch {
        line: usize,
        old_count: usize,
        new_count: usize,
    },
    #[error("cannot diff two empty inputs")]
    BothEmpty,
}

/// Role of a line inside a hunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LineTag {
    Keep,
    Add,
    Del,
}

impl LineTag {
    pub fn marker(self) -> char {
        match self {
            LineTag::Keep => ' ',
            LineTag::Add => '+',
            LineTag::Del => '-',
        }
    }

    pub fn from_marker(c: char) -> Option<Self> {
        match c {
            ' ' => Some(LineTag::Keep),
            '+' => Some(LineTag::Add),
            '-' => Some(LineTag::Del),
            _ => None,
        }
    }

    /// Whether the line exists in the pre-change version.
    pub fn in_old(self) -> bool {
        matches!(self, LineTag::Keep | LineTag::Del)
    }

    /// Whether the line exists in the post-change version.
    pub fn in_new(self) -> bool {
        matches!(self, LineTag::Keep | LineTag::Add)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaggedLine {
    pub tag: LineTag,
    pub content: String,
}

impl TaggedLine {
    pub fn new(tag: LineTag, content: impl Into<String>) -> Self {
        Self {
            tag,
            content: content.into(),
        }
    }
}

/// One `@@` block of a unified diff.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiffHunk {
    pub old_start: usize,
    pub old_count: usize,
    pub new_start: usize,
    pub new_count: usize,
    pub lines: Vec<TaggedLine>,
    #[serde(default)]
    pub file_path: String,
}

/// The two sides of a hunk: pre-change lines and post-change lines.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CodePair {
    pub old_lines: Vec<String>,
    pub new_lines: Vec<String>,
}

/// Location of a parsed hunk inside the diff text, as 0-based line indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HunkSpan {
    pub header_line: usize,
    /// Last line that belongs to the hunk, including any trailing
    /// "\ No newline at end of file" marker.
    pub last_line: usize,
}

impl DiffHunk {
    /// Builds a hunk from tagged lines, deriving both counts.
    pub fn from_lines(
        old_start: usize,
        new_start: usize,
        lines: Vec<TaggedLine>,
        file_path: impl Into<String>,
    ) -> Self {
        let old_count = lines.iter().filter(|l| l.tag.in_old()).count();
        let new_count = lines.iter().filter(|l| l.tag.in_new()).count();
        Self {
            old_start,
            old_count,
            new_start,
            new_count,
            lines,
            file_path: file_path.into(),
        }
    }

    /// Checks the structural invariants: declared counts agree with the
    /// tagged lines, at least one line, and no embedded newlines.
    pub fn is_well_formed(&self) -> bool {
        !self.lines.is_empty()
            && self.lines.iter().filter(|l| l.tag.in_old()).count() == self.old_count
            && self.lines.iter().filter(|l| l.tag.in_new()).count() == self.new_count
            && self.lines.iter().all(|l| !l.content.contains('\n'))
    }

    pub fn tags(&self) -> impl Iterator<Item = LineTag> + '_ {
        self.lines.iter().map(|l| l.tag)
    }

    /// Splits the hunk back into its pre- and post-change line lists.
    pub fn reconstruct(&self) -> CodePair {
        let mut pair = CodePair::default();
        for line in &self.lines {
            if line.tag.in_old() {
                pair.old_lines.push(line.content.clone());
            }
            if line.tag.in_new() {
                pair.new_lines.push(line.content.clone());
            }
        }
        pair
    }

    /// The 1-based new-side line range `[first, last]` covered by the hunk,
    /// or `None` for a pure deletion.
    pub fn new_range(&self) -> Option<(usize, usize)> {
        (self.new_count > 0).then(|| (self.new_start, self.new_start + self.new_count - 1))
    }

    /// The 1-based old-side line range covered by the hunk.
    pub fn old_range(&self) -> Option<(usize, usize)> {
        (self.old_count > 0).then(|| (self.old_start, self.old_start + self.old_count - 1))
    }

    /// Serializes the hunk as unified-diff text (header plus body, each line
    /// newline-terminated). File headers are not emitted.
    pub fn to_unified(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{self}");
        out
    }
}

impl fmt::Display for DiffHunk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "@@ -{},{} +{},{} @@",
            self.old_start, self.old_count, self.new_start, self.new_count
        )?;
        for line in &self.lines {
            f.write_char(line.tag.marker())?;
            f.write_str(&line.content)?;
            f.write_char('\n')?;
        }
        Ok(())
    }
}

/// Parses every hunk in `text`. File headers are optional; the most recent
/// `+++` (or `---` for deletions) path is attached to subsequent hunks.
pub fn parse_unified_diff(text: &str) -> Result<Vec<DiffHunk>, DiffError> {
    Ok(parse_unified_diff_with_spans(text)?
        .into_iter()
        .map(|(hunk, _)| hunk)
        .collect())
}

/// Like [`parse_unified_diff`] but also reports where each hunk sits in the
/// input, which is what code-host comment positions are relative to.
pub fn parse_unified_diff_with_spans(text: &str) -> Result<Vec<(DiffHunk, HunkSpan)>, DiffError> {
    let lines: Vec<&str> = if text.is_empty() {
        Vec::new()
    } else {
        text.strip_suffix('\n').unwrap_or(text).split('\n').collect()
    };

    let mut hunks = Vec::new();
    let mut old_path: Option<String> = None;
    let mut new_path: Option<String> = None;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.starts_with("@@") {
            let (hunk, last) = parse_hunk(&lines, i, current_path(&old_path, &new_path))?;
            hunks.push((
                hunk,
                HunkSpan {
                    header_line: i,
                    last_line: last,
                },
            ));
            i = last + 1;
            continue;
        }
        if let Some(rest) = line.strip_prefix("--- ") {
            old_path = Some(strip_path(rest));
            new_path = None;
        } else if let Some(rest) = line.strip_prefix("+++ ") {
            new_path = Some(strip_path(rest));
        } else if line.starts_with("diff ") {
            old_path = None;
            new_path = None;
        } else if !hunks.is_empty() && (line.starts_with('+') || line.starts_with('-') || line.starts_with(' ')) {
            // body line past the declared counts of the previous hunk
            let (prev, _) = hunks.last().expect("non-empty");
            let prev: &DiffHunk = prev;
            return Err(DiffError::CountMismatch {
                line: i + 1,
                old_count: prev.old_count,
                new_count: prev.new_count,
            });
        }
        i += 1;
    }
    Ok(hunks)
}

fn current_path(old: &Option<String>, new: &Option<String>) -> String {
    match (new.as_deref(), old.as_deref()) {
        (Some(p), _) if p != "/dev/null" => p.to_string(),
        (_, Some(p)) if p != "/dev/null" => p.to_string(),
        _ => String::new(),
    }
}

fn strip_path(raw: &str) -> String {
    // "a/src/x.rs\t2024-01-01 ..." -> "src/x.rs"
    let path = raw.split('\t').next().unwrap_or(raw).trim_end();
    let path = path
        .strip_prefix("a/")
        .or_else(|| path.strip_prefix("b/"))
        .unwrap_or(path);
    path.to_string()
}

/// Parses `-a[,b] +c[,d]` out of an `@@` header line.
fn parse_header(line: &str) -> Option<(usize, usize, usize, usize)> {
    let rest = line.strip_prefix("@@ ")?;
    let end = rest.find(" @@")?;
    let mut parts = rest[..end].split(' ');
    let old = parts.next()?.strip_prefix('-')?;
    let new = parts.next()?.strip_prefix('+')?;
    if parts.next().is_some() {
        return None;
    }
    let (old_start, old_count) = parse_range(old)?;
    let (new_start, new_count) = parse_range(new)?;
    Some((old_start, old_count, new_start, new_count))
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    let digits = |t: &str| -> Option<usize> {
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        t.parse().ok()
    };
    match s.split_once(',') {
        Some((start, count)) => Some((digits(start)?, digits(count)?)),
        None => Some((digits(s)?, 1)),
    }
}

fn parse_hunk(lines: &[&str], header_idx: usize, file_path: String) -> Result<(DiffHunk, usize), DiffError> {
    let header = lines[header_idx];
    let (old_start, old_count, new_start, new_count) =
        parse_header(header).ok_or_else(|| DiffError::MalformedHeader {
            line: header_idx + 1,
            header: header.to_string(),
        })?;
    let mismatch = || DiffError::CountMismatch {
        line: header_idx + 1,
        old_count,
        new_count,
    };

    let mut body = Vec::new();
    let (mut old_seen, mut new_seen) = (0usize, 0usize);
    let mut i = header_idx + 1;
    while old_seen < old_count || new_seen < new_count {
        let Some(&line) = lines.get(i) else {
            return Err(mismatch());
        };
        i += 1;
        if line.starts_with('\\') {
            continue;
        }
        let (tag, content) = match line.chars().next() {
            // some tools strip the single space of an empty context line
            None => (LineTag::Keep, ""),
            Some(c) => match LineTag::from_marker(c) {
                Some(tag) => (tag, &line[1..]),
                None => return Err(mismatch()),
            },
        };
        if tag.in_old() {
            old_seen += 1;
        }
        if tag.in_new() {
            new_seen += 1;
        }
        if old_seen > old_count || new_seen > new_count {
            return Err(mismatch());
        }
        body.push(TaggedLine::new(tag, content));
    }
    while lines.get(i).is_some_and(|l| l.starts_with('\\')) {
        i += 1;
    }
    if body.is_empty() {
        return Err(mismatch());
    }
    let hunk = DiffHunk {
        old_start,
        old_count,
        new_start,
        new_count,
        lines: body,
        file_path,
    };
    Ok((hunk, i - 1))
}

/// Computes a single hunk covering both inputs with a longest-common-
/// subsequence alignment over whole lines. At equal cost a deletion is
/// emitted before an insertion.
pub fn compute_diff<S: AsRef<str>>(old_lines: &[S], new_lines: &[S]) -> Result<DiffHunk, DiffError> {
    if old_lines.is_empty() && new_lines.is_empty() {
        return Err(DiffError::BothEmpty);
    }
    let (n, m) = (old_lines.len(), new_lines.len());
    let eq = |i: usize, j: usize| old_lines[i].as_ref() == new_lines[j].as_ref();

    // lcs[i][j] = LCS length of old[i..] and new[j..]
    let width = m + 1;
    let mut lcs = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i * width + j] = if eq(i, j) {
                lcs[(i + 1) * width + j + 1] + 1
            } else {
                lcs[(i + 1) * width + j].max(lcs[i * width + j + 1])
            };
        }
    }

    let mut lines = Vec::with_capacity(n + m);
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && eq(i, j) {
            lines.push(TaggedLine::new(LineTag::Keep, old_lines[i].as_ref()));
            i += 1;
            j += 1;
        } else if i < n && (j == m || lcs[(i + 1) * width + j] >= lcs[i * width + j + 1]) {
            lines.push(TaggedLine::new(LineTag::Del, old_lines[i].as_ref()));
            i += 1;
        } else {
            lines.push(TaggedLine::new(LineTag::Add, new_lines[j].as_ref()));
            j += 1;
        }
    }
    Ok(DiffHunk::from_lines(1, 1, lines, ""))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use LineTag::*;

    fn tags(h: &DiffHunk) -> Vec<LineTag> {
        h.tags().collect()
    }

    #[test]
    fn parses_single_hunk() {
        let hunks = parse_unified_diff("@@ -1,3 +1,4 @@\n a\n+b\n c\n d").unwrap();
        assert_eq!(hunks.len(), 1);
        let h = &hunks[0];
        assert_eq!((h.old_start, h.old_count, h.new_start, h.new_count), (1, 3, 1, 4));
        assert_eq!(tags(h), [Keep, Add, Keep, Keep]);
        assert!(h.is_well_formed());
    }

    #[test]
    fn empty_input_has_no_hunks() {
        assert!(parse_unified_diff("").unwrap().is_empty());
        assert!(parse_unified_diff("just some text\n").unwrap().is_empty());
    }

    #[test]
    fn header_without_counts_defaults_to_one() {
        let h = &parse_unified_diff("@@ -3 +3 @@ fn foo()\n-x\n+y\n").unwrap()[0];
        assert_eq!((h.old_start, h.old_count, h.new_start, h.new_count), (3, 1, 3, 1));
        assert_eq!(tags(h), [Del, Add]);
    }

    #[test]
    fn drops_no_newline_markers() {
        let text = "@@ -1 +1 @@\n-a\n\\ No newline at end of file\n+b\n\\ No newline at end of file\n";
        let spans = parse_unified_diff_with_spans(text).unwrap();
        assert_eq!(tags(&spans[0].0), [Del, Add]);
        assert_eq!(spans[0].1, HunkSpan { header_line: 0, last_line: 4 });
    }

    #[test]
    fn file_headers_attach_paths() {
        let text = "diff --git a/x.py b/x.py\n--- a/x.py\n+++ b/x.py\n@@ -1 +1 @@\n-a\n+b\n\
                    --- a/gone.py\n+++ /dev/null\n@@ -1 +0,0 @@\n-z\n";
        let hunks = parse_unified_diff(text).unwrap();
        assert_eq!(hunks[0].file_path, "x.py");
        assert_eq!(hunks[1].file_path, "gone.py");
        assert_eq!(hunks[1].new_count, 0);
    }

    #[test]
    fn rejects_malformed_header() {
        for bad in ["@@ -a,1 +1 @@\n x\n", "@@ -1,1 1 @@\n x\n", "@@ -1,1 +1,1\n x\n"] {
            assert!(matches!(
                parse_unified_diff(bad),
                Err(DiffError::MalformedHeader { line: 1, .. })
            ));
        }
    }

    #[test]
    fn rejects_count_mismatch() {
        // body too short
        assert!(matches!(
            parse_unified_diff("@@ -1,3 +1,3 @@\n a\n b\n"),
            Err(DiffError::CountMismatch { .. })
        ));
        // body too long
        assert!(matches!(
            parse_unified_diff("@@ -1,1 +1,1 @@\n a\n b\n"),
            Err(DiffError::CountMismatch { .. })
        ));
        // extra add overflows the new side
        assert!(matches!(
            parse_unified_diff("@@ -1,1 +1,1 @@\n+a\n b\n"),
            Err(DiffError::CountMismatch { .. })
        ));
    }

    #[test]
    fn reconstruct_splits_sides() {
        let h = DiffHunk::from_lines(
            1,
            1,
            vec![
                TaggedLine::new(Keep, "x"),
                TaggedLine::new(Add, "y"),
                TaggedLine::new(Del, "z"),
            ],
            "",
        );
        let pair = h.reconstruct();
        assert_eq!(pair.old_lines, ["x", "z"]);
        assert_eq!(pair.new_lines, ["x", "y"]);
    }

    #[test]
    fn reconstruct_pure_insert() {
        let h = DiffHunk::from_lines(0, 1, vec![TaggedLine::new(Add, "a"), TaggedLine::new(Add, "b")], "");
        let pair = h.reconstruct();
        assert!(pair.old_lines.is_empty());
        assert_eq!(pair.new_lines, ["a", "b"]);
    }

    #[test]
    fn compute_diff_basic_cases() {
        assert_eq!(tags(&compute_diff(&["a"], &["a"]).unwrap()), [Keep]);
        assert_eq!(tags(&compute_diff(&["a"], &["b"]).unwrap()), [Del, Add]);
        assert_eq!(tags(&compute_diff::<&str>(&[], &["b"]).unwrap()), [Add]);
        assert_eq!(
            tags(&compute_diff(&["a", "b", "c"], &["a", "x", "c"]).unwrap()),
            [Keep, Del, Add, Keep]
        );
        assert_eq!(compute_diff::<&str>(&[], &[]), Err(DiffError::BothEmpty));
    }

    #[test]
    fn serialize_then_parse_is_identity() {
        let h = compute_diff(&["fn a() {", "  x", "}"], &["fn a() {", "  y", "  z", "}"]).unwrap();
        let text = h.to_unified();
        assert!(text.starts_with("@@ -1,3 +1,4 @@\n"));
        assert_eq!(parse_unified_diff(&text).unwrap(), [h]);
    }

    #[test]
    fn ranges() {
        let h = parse_unified_diff("@@ -10,2 +12,3 @@\n a\n+b\n c\n").unwrap().remove(0);
        assert_eq!(h.old_range(), Some((10, 11)));
        assert_eq!(h.new_range(), Some((12, 14)));
        let del = parse_unified_diff("@@ -4,1 +3,0 @@\n-gone\n").unwrap().remove(0);
        assert_eq!(del.new_range(), None);
        assert_eq!(del.to_unified().to_string(), "@@ -4,1 +3,0 @@\n-gone\n");
    }
}
