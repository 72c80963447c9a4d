//! Pull-request review data: a small REST client, fixture loading and
//! normalization into per-hunk [`ReviewRecord`]s.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, Utc};
use codereviewer_core::diff::{parse_unified_diff_with_spans, DiffHunk, HunkSpan, LineTag};
use codereviewer_core::compute_diff;
use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOKEN_ENV: &str = "CODEHOST_TOKEN";
pub const DEFAULT_BASE_URL: &str = "https://api.github.com";
const PER_PAGE: usize = 100;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("authentication failed ({status}) for {url}")]
    AuthError { status: u16, url: String },
    #[error("rate limited on {url} after {retries} retries")]
    RateLimited { url: String, retries: u32 },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("HTTP {status} from {url}")]
    Status { status: u16, url: String },
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: ureq::Error,
    },
    #[error("unexpected response from {url}: {source}")]
    Decode {
        url: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid repository name {0:?}, expected owner/name")]
    BadRepo(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPullRequest {
    pub repo: String,
    pub pr_number: u64,
    pub pr_author: String,
    pub commits: Vec<RawCommit>,
    pub review_comments: Vec<RawComment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCommit {
    pub sha: String,
    #[serde(default)]
    pub parent_sha: String,
    pub files: Vec<RawFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFile {
    pub path: String,
    pub unified_diff: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawComment {
    pub body: String,
    pub author: String,
    pub commit_sha: String,
    pub path: String,
    /// Lines below the first `@@` header of the file's diff.
    pub diff_position: u64,
    pub created_at: DateTime<Utc>,
}

/// Blocking client for the code host's REST API.
#[derive(Debug, Clone)]
pub struct Client {
    agent: ureq::Agent,
    base_url: String,
    token: Option<String>,
    max_retries: u32,
    max_wait: Duration,
}

impl Client {
    pub fn new(base_url: impl Into<String>, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .user_agent(concat!("codereviewer/", env!("CARGO_PKG_VERSION")))
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            token,
            max_retries: 3,
            max_wait: Duration::from_secs(15 * 60),
        }
    }

    /// Token from the given environment variable, if set and non-empty.
    pub fn token_from_env(var: &str) -> Option<String> {
        std::env::var(var).ok().filter(|t| !t.trim().is_empty())
    }

    /// Caps how long a single rate-limit wait may last.
    pub fn with_max_wait(mut self, max_wait: Duration) -> Self {
        self.max_wait = max_wait;
        self
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, IngestError> {
        let url = format!("{}{}", self.base_url, path);
        let mut retries = 0;
        loop {
            let mut req = self
                .agent
                .get(&url)
                .header("Accept", "application/vnd.github.v3+json");
            if let Some(t) = &self.token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            let mut resp = req.call().map_err(|source| IngestError::Transport {
                url: url.clone(),
                source,
            })?;
            let status = resp.status().as_u16();
            let header = |name: &str| {
                resp.headers()
                    .get(name)
                    .and_then(|v| v.to_str().ok())
                    .map(str::to_string)
            };
            match status {
                200..=299 => {
                    let bytes = resp
                        .body_mut()
                        .with_config()
                        .limit(64 * 1024 * 1024)
                        .read_to_vec()
                        .map_err(|source| IngestError::Transport {
                            url: url.clone(),
                            source,
                        })?;
                    let text = String::from_utf8_lossy(&bytes);
                    return serde_json::from_str(&text).map_err(|source| IngestError::Decode { url, source });
                }
                401 => return Err(IngestError::AuthError { status, url }),
                403 | 429 => {
                    let wait = rate_limit_wait(
                        header("retry-after").as_deref(),
                        header("x-ratelimit-remaining").as_deref(),
                        header("x-ratelimit-reset").as_deref(),
                        now_epoch(),
                    );
                    let wait = match (wait, status) {
                        (Some(w), _) => w,
                        (None, 429) => Duration::from_secs(1),
                        (None, _) => return Err(IngestError::AuthError { status, url }),
                    };
                    if retries >= self.max_retries {
                        return Err(IngestError::RateLimited { url, retries });
                    }
                    retries += 1;
                    let wait = wait.min(self.max_wait);
                    warn!("rate limited on {url}; waiting {wait:?} (retry {retries}/{})", self.max_retries);
                    thread::sleep(wait);
                }
                404 => return Err(IngestError::NotFound(url)),
                _ => return Err(IngestError::Status { status, url }),
            }
        }
    }

    fn get_paged<T: DeserializeOwned>(&self, path: &str, limit: usize) -> Result<Vec<T>, IngestError> {
        let sep = if path.contains('?') { '&' } else { '?' };
        let mut out = Vec::new();
        for page in 1.. {
            let items: Vec<T> = self.get_json(&format!("{path}{sep}per_page={PER_PAGE}&page={page}"))?;
            let n = items.len();
            out.extend(items);
            if n < PER_PAGE || out.len() >= limit {
                break;
            }
        }
        out.truncate(limit);
        Ok(out)
    }

    /// Up to `max_prs` pull requests of `repo` with their commits, per-commit
    /// file diffs and review comments, ordered by number.
    pub fn fetch_pull_requests(&self, repo: &str, max_prs: usize) -> Result<Vec<RawPullRequest>, IngestError> {
        if repo.split('/').count() != 2 || repo.split('/').any(str::is_empty) {
            return Err(IngestError::BadRepo(repo.to_string()));
        }
        if max_prs == 0 {
            return Ok(Vec::new());
        }
        let base = format!("/repos/{repo}");
        let pulls: Vec<ApiPull> =
            self.get_paged(&format!("{base}/pulls?state=all&sort=created&direction=asc"), max_prs)?;
        let mut out = Vec::with_capacity(pulls.len());
        for pull in pulls {
            let n = pull.number;
            debug!("fetching {repo}#{n}");
            let listed: Vec<ApiCommitRef> = self.get_paged(&format!("{base}/pulls/{n}/commits"), usize::MAX)?;
            let mut commits = Vec::with_capacity(listed.len());
            for c in listed {
                let detail: ApiCommit = self.get_json(&format!("{base}/commits/{}", c.sha))?;
                commits.push(RawCommit {
                    parent_sha: detail.parents.first().map(|p| p.sha.clone()).unwrap_or_default(),
                    files: detail
                        .files
                        .into_iter()
                        .filter_map(|f| {
                            f.patch.map(|patch| RawFile {
                                path: f.filename,
                                unified_diff: patch,
                            })
                        })
                        .collect(),
                    sha: detail.sha,
                });
            }
            let comments: Vec<ApiComment> = self.get_paged(&format!("{base}/pulls/{n}/comments"), usize::MAX)?;
            let review_comments = comments
                .into_iter()
                .filter_map(|c| {
                    let commit_sha = c.original_commit_id.or(c.commit_id)?;
                    let position = c.original_position.or(c.position)?;
                    Some(RawComment {
                        body: c.body,
                        author: c.user.map(|u| u.login).unwrap_or_default(),
                        commit_sha,
                        path: c.path,
                        diff_position: position,
                        created_at: c.created_at,
                    })
                })
                .collect();
            out.push(RawPullRequest {
                repo: repo.to_string(),
                pr_number: n,
                pr_author: pull.user.map(|u| u.login).unwrap_or_default(),
                commits,
                review_comments,
            });
        }
        out.sort_by_key(|p| p.pr_number);
        Ok(out)
    }

    /// Fetches several repositories concurrently. The result is ordered by
    /// (repo, pr_number) whatever the completion order.
    pub fn fetch_many(&self, repos: &[String], max_prs: usize) -> Result<Vec<RawPullRequest>, IngestError> {
        let results: Vec<Result<Vec<RawPullRequest>, IngestError>> = thread::scope(|s| {
            let handles: Vec<_> = repos
                .iter()
                .map(|r| s.spawn(move || self.fetch_pull_requests(r, max_prs)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fetch thread panicked"))
                .collect()
        });
        let mut all = Vec::new();
        for r in results {
            all.extend(r?);
        }
        all.sort_by(|a, b| (&a.repo, a.pr_number).cmp(&(&b.repo, b.pr_number)));
        Ok(all)
    }
}

fn now_epoch() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// How long to wait before retrying, from `Retry-After` or from an exhausted
/// `X-RateLimit-Remaining` plus `X-RateLimit-Reset` (epoch seconds).
pub fn rate_limit_wait(
    retry_after: Option<&str>,
    remaining: Option<&str>,
    reset: Option<&str>,
    now: u64,
) -> Option<Duration> {
    if let Some(secs) = retry_after.and_then(|v| v.trim().parse::<u64>().ok()) {
        return Some(Duration::from_secs(secs));
    }
    let exhausted = remaining.map(str::trim) == Some("0");
    let reset = reset.and_then(|v| v.trim().parse::<u64>().ok())?;
    exhausted.then(|| Duration::from_secs(reset.saturating_sub(now)))
}

#[derive(Deserialize)]
struct ApiUser {
    login: String,
}

#[derive(Deserialize)]
struct ApiPull {
    number: u64,
    user: Option<ApiUser>,
}

#[derive(Deserialize)]
struct ApiCommitRef {
    sha: String,
}

#[derive(Deserialize)]
struct ApiCommit {
    sha: String,
    #[serde(default)]
    parents: Vec<ApiCommitRef>,
    #[serde(default)]
    files: Vec<ApiFile>,
}

#[derive(Deserialize)]
struct ApiFile {
    filename: String,
    patch: Option<String>,
}

#[derive(Deserialize)]
struct ApiComment {
    body: String,
    user: Option<ApiUser>,
    path: String,
    commit_id: Option<String>,
    original_commit_id: Option<String>,
    position: Option<u64>,
    original_position: Option<u64>,
    created_at: DateTime<Utc>,
}

/// A fixture line that failed to load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub file: PathBuf,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct FixtureLoad {
    pub records: Vec<RawPullRequest>,
    pub skipped: Vec<SkippedLine>,
}

/// Loads every `*.jsonl` file of `dir` in file-name order. Lines that fail
/// to parse are logged and skipped; invalid UTF-8 is replaced.
pub fn load_fixtures(dir: &Path) -> Result<FixtureLoad, IngestError> {
    let io = |source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = FixtureLoad::default();
    for file in files {
        let bytes = fs::read(&file).map_err(|source| IngestError::Io {
            path: file.clone(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RawPullRequest>(line) {
                Ok(pr) => out.records.push(pr),
                Err(e) => {
                    warn!("{}:{}: skipping malformed record: {e}", file.display(), i + 1);
                    out.skipped.push(SkippedLine {
                        file: file.clone(),
                        line: i + 1,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewComment {
    pub body: String,
    pub author: String,
    pub created_at: DateTime<Utc>,
}

/// One diff hunk of one file of one commit, with the review comments
/// anchored inside it and the follow-up revision of the same lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub repo: String,
    pub pr_number: u64,
    pub commit_sha: String,
    pub hunk: DiffHunk,
    pub comments: Vec<ReviewComment>,
    pub pr_author: String,
    /// Old side is this hunk's new side (C1), new side is C1 after the next
    /// commit's edits (C2).
    pub later_revision: Option<DiffHunk>,
    /// max(comments on this hunk, next-commit hunks revising it); zero when
    /// there is no revision.
    pub revision_link_count: u32,
}

impl ReviewRecord {
    pub fn has_comment(&self) -> bool {
        !self.comments.is_empty()
    }
}

struct ParsedFile<'a> {
    path: &'a str,
    hunks: Vec<(DiffHunk, HunkSpan)>,
}

fn parse_commit(commit: &RawCommit) -> Vec<ParsedFile<'_>> {
    commit
        .files
        .iter()
        .filter_map(|f| match parse_unified_diff_with_spans(&f.unified_diff) {
            Ok(mut hunks) => {
                for (h, _) in &mut hunks {
                    h.file_path = f.path.clone();
                }
                Some(ParsedFile { path: &f.path, hunks })
            }
            Err(e) => {
                warn!("{} {}: skipping unparseable diff: {e}", commit.sha, f.path);
                None
            }
        })
        .collect()
}

/// Diff text line of a comment position: lines below the first header.
fn position_line(hunks: &[(DiffHunk, HunkSpan)], position: u64) -> Option<usize> {
    let first = hunks.first()?.1.header_line;
    Some(first + usize::try_from(position).ok()?)
}

/// Applies `revisions` (hunks against the file that `hunk` produced) to the
/// hunk's new side. Each revision must lie inside that side and agree with
/// its content. Returns C2 and the number of revisions applied.
fn revise(hunk: &DiffHunk, revisions: &[&DiffHunk]) -> Option<Vec<String>> {
    let c1 = hunk.reconstruct().new_lines;
    let (first, last) = hunk.new_range()?;
    let mut c2 = Vec::new();
    let mut cursor = 0;
    for r in revisions {
        // 0-based index into C1 where the revision starts
        let at = if r.old_count == 0 {
            r.old_start.checked_sub(first - 1)?
        } else {
            if r.old_start < first || r.old_start + r.old_count - 1 > last {
                return None;
            }
            r.old_start - first
        };
        let pair = r.reconstruct();
        if at < cursor || at + pair.old_lines.len() > c1.len() || c1[at..at + pair.old_lines.len()] != pair.old_lines[..] {
            return None;
        }
        c2.extend_from_slice(&c1[cursor..at]);
        c2.extend(pair.new_lines);
        cursor = at + pair.old_lines.len();
    }
    c2.extend_from_slice(&c1[cursor..]);
    Some(c2)
}

/// Drops the leading and trailing context of a hunk, leaving the span from
/// its first to its last changed line. A core without old lines keeps the
/// unified convention of `old_start` naming the line it follows.
pub fn changed_core(hunk: &DiffHunk) -> Option<DiffHunk> {
    let first = hunk.lines.iter().position(|l| l.tag != LineTag::Keep)?;
    let last = hunk.lines.iter().rposition(|l| l.tag != LineTag::Keep)?;
    let lines = hunk.lines[first..=last].to_vec();
    let mut core = DiffHunk::from_lines(hunk.old_start + first, hunk.new_start + first, lines, hunk.file_path.clone());
    if core.old_count == 0 && hunk.old_count > 0 {
        core.old_start -= 1;
    }
    if core.new_count == 0 && hunk.new_count > 0 {
        core.new_start -= 1;
    }
    Some(core)
}

/// Whether a next-commit hunk touches lines of `hunk`'s new side.
fn touches(hunk: &DiffHunk, revision: &DiffHunk) -> bool {
    let Some((first, last)) = hunk.new_range() else {
        return false;
    };
    if revision.old_count == 0 {
        // insertion after line old_start
        return revision.old_start + 1 >= first && revision.old_start <= last;
    }
    let (r_first, r_last) = (revision.old_start, revision.old_start + revision.old_count - 1);
    r_first <= last && r_last >= first
}

/// Splits a pull request into per-hunk records. Comments attach to the hunk
/// whose lines contain their position in the same commit and file. A hunk's
/// revision comes from the commit whose parent is the hunk's commit: the
/// changed cores of that commit's hunks on the same file that touch the
/// hunk's new-side lines. A core reaching outside those lines makes the
/// revision ambiguous and none is recorded.
pub fn normalize(raw: &RawPullRequest) -> Vec<ReviewRecord> {
    let parsed: Vec<Vec<ParsedFile<'_>>> = raw.commits.iter().map(parse_commit).collect();
    let mut out = Vec::new();
    for (ci, commit) in raw.commits.iter().enumerate() {
        let next = raw
            .commits
            .iter()
            .position(|c| !commit.sha.is_empty() && c.parent_sha == commit.sha);
        for file in &parsed[ci] {
            let next_hunks: Vec<DiffHunk> = next
                .and_then(|ni| parsed[ni].iter().find(|f| f.path == file.path))
                .map(|f| f.hunks.iter().filter_map(|(h, _)| changed_core(h)).collect())
                .unwrap_or_default();
            for (hunk, span) in &file.hunks {
                let comments: Vec<ReviewComment> = raw
                    .review_comments
                    .iter()
                    .filter(|c| c.commit_sha == commit.sha && c.path == file.path && !c.body.trim().is_empty())
                    .filter(|c| {
                        position_line(&file.hunks, c.diff_position)
                            .is_some_and(|line| line > span.header_line && line <= span.last_line)
                    })
                    .map(|c| ReviewComment {
                        body: c.body.clone(),
                        author: c.author.clone(),
                        created_at: c.created_at,
                    })
                    .collect();
                let linked: Vec<&DiffHunk> = next_hunks.iter().filter(|r| touches(hunk, r)).collect();
                let later_revision = if linked.is_empty() {
                    None
                } else {
                    revise(hunk, &linked).and_then(|c2| {
                        let c1 = hunk.reconstruct().new_lines;
                        let mut d = compute_diff(&c1, &c2).ok()?;
                        d.old_start = hunk.new_start;
                        d.new_start = hunk.new_start;
                        d.file_path = hunk.file_path.clone();
                        Some(d)
                    })
                };
                let revision_link_count = if later_revision.is_some() {
                    comments.len().max(linked.len()) as u32
                } else {
                    0
                };
                out.push(ReviewRecord {
                    repo: raw.repo.clone(),
                    pr_number: raw.pr_number,
                    commit_sha: commit.sha.clone(),
                    hunk: hunk.clone(),
                    comments,
                    pr_author: raw.pr_author.clone(),
                    later_revision,
                    revision_link_count,
                });
            }
        }
    }
    out
}
