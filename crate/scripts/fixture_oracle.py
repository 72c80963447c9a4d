#!/usr/bin/env python3
"""Independent recount of the fixture corpus.

Re-implements, from the raw pull-request JSON, the record extraction, the
comment-cleaning rules, the three dataset builders' sample counts and the
project split, without sharing code with the Rust crates. The printed JSON
is frozen into the Rust tests.

usage: fixture_oracle.py [FIXTURE_DIR] [--seed N]
"""

import glob
import json
import math
import os
import sys
from datetime import datetime

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

SPLIT = {
    "train_projects": ["acme/parser", "acme/cache", "orbit/scheduler", "orbit/ledger"],
    "eval_projects": ["acme/netkit", "acme/webui", "orbit/imaging", "orbit/shell"],
    "valid_fraction": 0.5,
}


def fnv(data, h=FNV_OFFSET):
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def parse_patch(text):
    """List of hunks as dicts, or None when any hunk is malformed."""
    lines = text[:-1].split("\n") if text.endswith("\n") else text.split("\n")
    hunks = []
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.startswith("@@"):
            if hunks and line[:1] in ("+", "-", " "):
                return None
            i += 1
            continue
        try:
            _, old, new, *_ = line.split(" ")
            os_, _, oc = old[1:].partition(",")
            ns, _, nc = new[1:].partition(",")
            os_, ns = int(os_), int(ns)
            oc = int(oc) if oc else 1
            nc = int(nc) if nc else 1
        except ValueError:
            return None
        body = []
        seen_old = seen_new = 0
        j = i + 1
        while seen_old < oc or seen_new < nc:
            if j >= len(lines):
                return None
            l = lines[j]
            j += 1
            if l.startswith("\\"):
                continue
            tag = l[:1] or " "
            if tag not in "+- ":
                return None
            if tag != "+":
                seen_old += 1
            if tag != "-":
                seen_new += 1
            body.append((tag, l[1:]))
        if seen_old > oc or seen_new > nc or not body:
            return None
        hunks.append({"old_start": os_, "old_count": oc, "new_start": ns, "new_count": nc,
                      "body": body, "header": i, "last": j - 1})
        i = j
    return hunks


def new_side(h):
    return [c for t, c in h["body"] if t != "-"]


def old_side(h):
    return [c for t, c in h["body"] if t != "+"]


def core(h):
    changed = [k for k, (t, _) in enumerate(h["body"]) if t != " "]
    if not changed:
        return None
    a, b = changed[0], changed[-1]
    body = h["body"][a:b + 1]
    oc = sum(t != "+" for t, _ in body)
    start = h["old_start"] + a - (1 if oc == 0 and h["old_count"] > 0 else 0)
    return {"old_start": start, "old_count": oc, "body": body}


def revision(h, cores):
    """C2 for hunk h after the touching cores, plus the number touching."""
    if h["new_count"] == 0:
        return None, 0
    first, last = h["new_start"], h["new_start"] + h["new_count"] - 1
    touching = []
    for c in cores:
        if c["old_count"] == 0:
            if first - 1 <= c["old_start"] <= last:
                touching.append(c)
        elif c["old_start"] <= last and c["old_start"] + c["old_count"] - 1 >= first:
            touching.append(c)
    if not touching:
        return None, 0
    c1 = new_side(h)
    c2, cursor = [], 0
    for c in touching:
        if c["old_count"] == 0:
            at = c["old_start"] - (first - 1)
        else:
            if c["old_start"] < first or c["old_start"] + c["old_count"] - 1 > last:
                return None, 0
            at = c["old_start"] - first
        olds = [x for t, x in c["body"] if t != "+"]
        if at < cursor or c1[at:at + len(olds)] != olds:
            return None, 0
        c2 += c1[cursor:at] + [x for t, x in c["body"] if t != "-"]
        cursor = at + len(olds)
    c2 += c1[cursor:]
    return c2, len(touching)


def records_of(pr):
    out = []
    parsed = []
    for commit in pr["commits"]:
        files = {}
        for f in commit["files"]:
            hunks = parse_patch(f["unified_diff"])
            if hunks is not None:
                files[f["path"]] = hunks
        parsed.append(files)
    for ci, commit in enumerate(pr["commits"]):
        nxt = next((k for k, c in enumerate(pr["commits"]) if commit["sha"] and c["parent_sha"] == commit["sha"]), None)
        for path, hunks in parsed[ci].items():
            cores = []
            if nxt is not None and path in parsed[nxt]:
                cores = [c for c in map(core, parsed[nxt][path]) if c]
            base = hunks[0]["header"]
            for h in hunks:
                comments = [c for c in pr["review_comments"]
                            if c["commit_sha"] == commit["sha"] and c["path"] == path and c["body"].strip()
                            and h["header"] < base + c["diff_position"] <= h["last"]]
                c2, linked = revision(h, cores)
                out.append({
                    "repo": pr["repo"], "pr": pr["pr_number"], "sha": commit["sha"], "path": path,
                    "old_start": h["old_start"], "new_start": h["new_start"],
                    "c1": new_side(h), "c2": c2,
                    "link": max(len(comments), linked) if c2 is not None else 0,
                    "comments": comments, "pr_author": pr["pr_author"],
                })
    return out


def reject(body, author):
    words = body.split()
    if author.endswith("[bot]") or author.endswith("-bot"):
        return "bot"
    if len(words) == 1 and (words[0].startswith("http://") or words[0].startswith("https://")):
        return "url_only"
    if len(words) < 3:
        return "too_short"
    if len(words) > 200:
        return "too_long"
    if body and sum(ord(ch) > 127 for ch in body) / len(body) > 0.5:
        return "non_ascii"
    return None


def clean(records):
    seen = set()
    stats = {}
    for r in records:
        kept = []
        for c in r["comments"]:
            why = reject(c["body"], c["author"])
            if why is None and (r["repo"], c["body"]) in seen:
                why = "duplicate"
            if why is None:
                seen.add((r["repo"], c["body"]))
                kept.append(c)
            else:
                stats[why] = stats.get(why, 0) + 1
        r["comments"] = kept
    return stats


def when(c):
    return datetime.fromisoformat(c["created_at"].replace("Z", "+00:00"))


def valid_projects(seed):
    ranked = sorted((fnv(p.encode(), fnv(seed.to_bytes(8, "little"))), p) for p in SPLIT["eval_projects"])
    n = len(ranked)
    k = math.floor(SPLIT["valid_fraction"] * n + 0.5)
    if n >= 2:
        k = min(max(k, 1), n - 1)
    return {p for _, p in ranked[:k]}


def main():
    args = sys.argv[1:]
    seed = 0
    if "--seed" in args:
        i = args.index("--seed")
        seed = int(args[i + 1])
        del args[i:i + 2]
    root = args[0] if args else os.path.join(os.path.dirname(__file__), "..", "crates", "codereviewer",
                                                  "tests", "fixtures", "prs")
    prs = []
    for path in sorted(glob.glob(os.path.join(root, "*.jsonl"))):
        with open(path, "rb") as fh:
            for line in fh.read().decode("utf-8", errors="replace").splitlines():
                if line.strip():
                    prs.append(json.loads(line))
    records = [r for pr in prs for r in records_of(pr)]
    raw_comment_total = sum(len(pr["review_comments"]) for pr in prs)
    attached = sum(len(r["comments"]) for r in records)
    with_revision = sum(r["c2"] is not None for r in records)
    stats = clean(records)
    kept = sum(len(r["comments"]) for r in records)

    def pairs(rs):
        return sum(any(c["author"] != r["pr_author"] for c in r["comments"]) for r in rs)

    def refinements(rs):
        return sum(len(r["comments"]) == 1 and r["link"] == 1 and r["c2"] is not None and r["c1"] != r["c2"]
                   for r in rs)

    valid = valid_projects(seed)
    splits = {"train": [], "valid": [], "test": []}
    for r in records:
        if r["repo"] in SPLIT["train_projects"]:
            splits["train"].append(r)
        elif r["repo"] in valid:
            splits["valid"].append(r)
        elif r["repo"] in SPLIT["eval_projects"]:
            splits["test"].append(r)
    per_split = {}
    for name, rs in splits.items():
        pos = sum(bool(r["comments"]) for r in rs)
        per_split[name] = {
            "records": len(rs),
            "quality_positives": pos,
            "quality_negatives": min(pos, len(rs) - pos),
            "comment_pairs": pairs(rs),
            "refinements": refinements(rs),
            "repos": sorted({r["repo"] for r in rs}),
        }
    print(json.dumps({
        "pull_requests": len(prs),
        "records": len(records),
        "raw_comments": raw_comment_total,
        "attached_comments": attached,
        "records_with_revision": with_revision,
        "kept_comments": kept,
        "dropped": dict(sorted(stats.items())),
        "commented_records": sum(bool(r["comments"]) for r in records),
        "comment_pairs": pairs(records),
        "refinements": refinements(records),
        "seed": seed,
        "splits": per_split,
    }, indent=2))


if __name__ == "__main__":
    main()
