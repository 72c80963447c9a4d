#!/usr/bin/env python3
"""Generate the offline pull-request fixture set.

Writes one JSONL file per repository under
crates/codereviewer/tests/fixtures/prs/. Every PR has a first commit with
one or two changed files, review comments anchored by diff position, and
usually a follow-up commit that revises some of the commented lines. A
handful of PRs carry the awkward cases the cleaning rules exist for.

Deterministic: rerunning reproduces the files byte for byte.
"""

import difflib
import hashlib
import json
import os
import random
from datetime import datetime, timedelta, timezone

ROOT = os.path.join(os.path.dirname(__file__), "..", "crates", "codereviewer", "tests", "fixtures", "prs")
REPOS = [
    "acme/parser", "acme/cache", "acme/netkit", "acme/webui",
    "orbit/scheduler", "orbit/ledger", "orbit/imaging", "orbit/shell",
]
PRS_PER_REPO = 25
USERS = ["alice", "bob", "carol", "dan", "erin", "frank", "grace", "heidi"]
NAMES = ["count", "total", "index", "value", "buffer", "result", "offset", "limit", "cursor", "weight",
         "score", "depth", "width", "height", "retries", "timeout", "chunk", "token", "entry", "node"]
FUNCS = ["parse", "load", "flush", "render", "resolve", "merge", "split", "encode", "decode", "visit",
         "update", "reset", "compute", "collect", "verify"]
COMMENTS = [
    "Consider renaming {v} to something more descriptive",
    "This should handle the case where {v} is empty",
    "Please add a unit test for {f}",
    "Why do we multiply by {k} here?",
    "The magic number {k} should be a named constant",
    "Can {f} return early instead of nesting this check?",
    "This changes the behaviour of {f} for negative {v}, is that intended?",
    "Could we log {v} before returning from {f}?",
    "I think {v} can overflow when it gets close to {k}",
    "Maybe move this logic out of {f} into a helper",
    "Please keep the old name {v} for backwards compatibility",
    "Is {k} still the right limit after this change?",
]
BASE_TIME = datetime(2021, 3, 1, tzinfo=timezone.utc)


def sha(*parts):
    return hashlib.sha1("/".join(map(str, parts)).encode()).hexdigest()


def ts(rng, day):
    t = BASE_TIME + timedelta(days=day, seconds=rng.randrange(86400))
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def py_func(rng):
    f, a, v = rng.choice(FUNCS), rng.choice(NAMES), rng.choice(NAMES)
    k, lim = rng.randrange(2, 9), rng.randrange(10, 99)
    return [
        f"def {f}_{a}({a}):",
        f"    {v} = {a} * {k}",
        f"    if {v} > {lim}:",
        f"        return {v} - {k}",
        f"    return {v}",
        "",
    ]


def rs_func(rng):
    f, a, v = rng.choice(FUNCS), rng.choice(NAMES), rng.choice(NAMES)
    k, lim = rng.randrange(2, 9), rng.randrange(10, 99)
    return [
        f"fn {f}_{a}({a}: u32) -> u32 {{",
        f"    let {v} = {a} * {k};",
        f"    if {v} > {lim} {{",
        f"        return {v} - {k};",
        "    }",
        f"    {v}",
        "}",
        "",
    ]


def js_func(rng):
    f, a, v = rng.choice(FUNCS), rng.choice(NAMES), rng.choice(NAMES)
    k, lim = rng.randrange(2, 9), rng.randrange(10, 99)
    return [
        f"function {f}{a.capitalize()}({a}) {{",
        f"  const {v} = {a} * {k};",
        f"  if ({v} > {lim}) {{",
        f"    return {v} - {k};",
        "  }",
        f"  return {v};",
        "}",
        "",
    ]


LANGS = [("py", py_func), ("rs", rs_func), ("js", js_func)]


def make_file(rng):
    ext, gen = rng.choice(LANGS)
    lines = []
    for _ in range(rng.randrange(5, 9)):
        lines.extend(gen(rng))
    return f"src/{rng.choice(FUNCS)}_{rng.choice(NAMES)}.{ext}", lines


def edit_line(rng, line):
    """A visible change to one line: a renamed identifier or a new constant."""
    for name in NAMES:
        if name in line:
            other = rng.choice([n for n in NAMES if n != name])
            return line.replace(name, other, 1)
    for d in "23456789":
        if d in line:
            return line.replace(d, str(rng.randrange(10, 99)), 1)
    return line + "  # changed"


def edit(rng, lines, n_edits, only=None):
    """Applies n_edits modifications/insertions/deletions at distinct,
    non-blank lines (restricted to indices in `only` when given)."""
    out = list(lines)
    candidates = [i for i, l in enumerate(out) if l.strip() and (only is None or i in only)]
    picks = sorted(rng.sample(candidates, min(n_edits, len(candidates))), reverse=True)
    for i in picks:
        kind = rng.random()
        if kind < 0.6:
            out[i] = edit_line(rng, out[i])
        elif kind < 0.85:
            indent = out[i][: len(out[i]) - len(out[i].lstrip())]
            out.insert(i + 1, f"{indent}log_{rng.choice(NAMES)}({rng.randrange(100)})")
        elif len(out) > 3:
            del out[i]
    if out == lines:
        out[candidates[0]] = out[candidates[0]] + "  # touched"
    return out


def patch(old, new):
    """GitHub-style patch: hunks only, no file headers."""
    lines = list(difflib.unified_diff(old, new, lineterm="", n=3))
    return "\n".join(lines[2:]) + "\n"


def hunk_spans(patch_text):
    """(first_position, last_position, new_start, new_lines) per hunk,
    positions counted below the first @@ header."""
    spans = []
    lines = patch_text.rstrip("\n").split("\n")
    for idx, line in enumerate(lines):
        if line.startswith("@@"):
            spans.append([idx + 1, idx, None])
        else:
            spans[-1][1] = idx
    return [(a, b) for a, b, _ in spans]


def comment_body(rng, text_vars):
    return rng.choice(COMMENTS).format(**text_vars)


def vars_for(rng, line):
    words = [w for w in NAMES if w in line] or [rng.choice(NAMES)]
    funcs = [f for f in FUNCS if f in line] or [rng.choice(FUNCS)]
    return {"v": words[0], "f": funcs[0], "k": rng.randrange(2, 64)}


def special_comment(rng, kind, pr_author, repo_dup):
    return {
        "bot": ("Coverage decreased by 0.4% on this change", rng.choice(["coverage[bot]", "lint-bot"])),
        "short": (rng.choice(["lgtm", "nit", "+1", "fixed now"]), rng.choice(USERS)),
        "self": ("I will clean this up in a follow-up change", pr_author),
        "url": ("https://example.com/style-guide#naming", rng.choice(USERS)),
        "nonascii": ("这里 应该 使用 常量 吗", rng.choice(USERS)),
        "dup": (repo_dup, rng.choice(USERS)),
    }[kind]


def make_pr(rng, repo, number):
    pr_author = rng.choice(USERS)
    reviewers = [u for u in USERS if u != pr_author]
    base = sha(repo, number, "base")
    c1, c2 = sha(repo, number, 1), sha(repo, number, 2)
    day = number * 3

    files_v0 = [make_file(rng) for _ in range(rng.choice([1, 1, 2]))]
    files_v1 = [(p, edit(rng, lines, rng.randrange(1, 4))) for p, lines in files_v0]
    commit1 = {"sha": c1, "parent_sha": base, "files": []}
    for (path, old), (_, new) in zip(files_v0, files_v1):
        commit1["files"].append({"path": path, "unified_diff": patch(old, new)})

    comments = []
    revise_lines = {}
    repo_dup = f"Please run the formatter on this file before merging ({repo.split('/')[1]})"
    for fi, f in enumerate(commit1["files"]):
        spans = hunk_spans(f["unified_diff"])
        diff_lines = f["unified_diff"].rstrip("\n").split("\n")
        for hi, (first, last) in enumerate(spans):
            if rng.random() < 0.45:
                continue
            pos = rng.randrange(first, last + 1)
            roll = rng.random()
            if roll < 0.08:
                body, author = special_comment(
                    rng, rng.choice(["bot", "short", "self", "url", "nonascii", "dup"]), pr_author, repo_dup
                )
            else:
                body, author = comment_body(rng, vars_for(rng, diff_lines[pos])), rng.choice(reviewers)
            comments.append({
                "body": body, "author": author, "commit_sha": c1, "path": f["path"],
                "diff_position": pos, "created_at": ts(rng, day),
            })
            if rng.random() < 0.15:
                second = comment_body(rng, vars_for(rng, diff_lines[pos]))
                comments.append({
                    "body": second, "author": rng.choice(reviewers), "commit_sha": c1, "path": f["path"],
                    "diff_position": rng.randrange(first, last + 1), "created_at": ts(rng, day),
                })
            if rng.random() < 0.75:
                revise_lines.setdefault(fi, []).append(diff_lines[first - 1])

    commits = [commit1]
    if revise_lines or rng.random() < 0.3:
        commit2 = {"sha": c2, "parent_sha": c1, "files": []}
        for fi, (path, v1) in enumerate(files_v1):
            only = None
            if fi in revise_lines:
                # lines of the new side under the commented hunk headers
                only = set()
                for header in revise_lines[fi]:
                    new_part = header.split(" ")[2][1:]
                    start, _, count = new_part.partition(",")
                    count = int(count) if count else 1
                    only.update(range(int(start) - 1, int(start) - 1 + count))
            elif rng.random() < 0.5:
                continue
            v2 = edit(rng, v1, rng.randrange(1, 3), only)
            commit2["files"].append({"path": path, "unified_diff": patch(v1, v2)})
        if commit2["files"]:
            commits.append(commit2)

    return {
        "repo": repo, "pr_number": number, "pr_author": pr_author,
        "commits": commits, "review_comments": comments,
    }


def main():
    rng = random.Random(20210301)
    os.makedirs(ROOT, exist_ok=True)
    for ri, repo in enumerate(REPOS):
        prs = [make_pr(rng, repo, 100 * (ri + 1) + n) for n in range(1, PRS_PER_REPO + 1)]
        # two deliberate oddities: a diff whose hunk is cut short, and a
        # comment body holding a byte that is not UTF-8
        if ri == 2:
            prs[4]["commits"][0]["files"].append({
                "path": "src/broken.py",
                "unified_diff": "@@ -1,3 +1,3 @@\n-a = 1\n",
            })
        lines = [json.dumps(pr, ensure_ascii=False).encode() for pr in prs]
        if ri == 5:
            target = next(i for i, pr in enumerate(prs) if pr["review_comments"])
            body = prs[target]["review_comments"][0]["body"]
            needle = json.dumps(body, ensure_ascii=False)[1:-1].encode()
            lines[target] = lines[target].replace(needle, needle + b" \xff", 1)
        name = repo.replace("/", "__") + ".jsonl"
        with open(os.path.join(ROOT, name), "wb") as fh:
            fh.write(b"\n".join(lines) + b"\n")


if __name__ == "__main__":
    main()
