"""Translate a large synthetic corpus with the mock backend and report peak memory.

Peak resident memory should depend on the shard size, not on the number of
records: run it at two corpus sizes with the same ``--shard-size`` and
compare.

    python scripts/scale_check.py --records 1000000 --shard-size 10000
"""

from __future__ import annotations

import argparse
import json
import resource
import shutil
import sys
import tempfile
import time
from pathlib import Path

from m3pipe.backends import MockTranslator
from m3pipe.records import Sample, Turn, write_manifest
from m3pipe.translate import TranslationJobConfig, run_job


def synthetic(n: int):
    for i in range(n):
        yield Sample(
            f"s{i:08d}", "en",
            (Turn("human", f"<image>\nDescribe picture number {i} in detail."),
             Turn("assistant", f"It shows item {i} on a wooden table.")),
            f"img/{i}.jpg", "synthetic",
        )


def peak_rss_mb() -> float:
    # VmHWM covers this process image only; ru_maxrss on Linux also keeps
    # the high-water mark of whatever process exec'd us
    try:
        for line in Path("/proc/self/status").read_text().splitlines():
            if line.startswith("VmHWM:"):
                return int(line.split()[1]) / 1024
    except OSError:
        pass
    # ru_maxrss is KiB on Linux, bytes on macOS
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return peak / (1024 * 1024) if sys.platform == "darwin" else peak / 1024


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--records", type=int, default=1_000_000)
    ap.add_argument("--shard-size", type=int, default=10_000)
    ap.add_argument("--target", default="zh")
    ap.add_argument("--parallelism", type=int, default=4)
    ap.add_argument("--work", help="working directory (default: a temporary one, removed afterwards)")
    ap.add_argument("--json", action="store_true", help="print one JSON line instead of text")
    args = ap.parse_args()

    work = Path(args.work) if args.work else Path(tempfile.mkdtemp(prefix="m3pipe-scale-"))
    started = time.perf_counter()
    try:
        src = write_manifest(synthetic(args.records), work / "src", "synthetic", "en", shard_size=args.shard_size)
        job = TranslationJobConfig(src.path, (args.target,), work / "out", work / "ckpt", parallelism=args.parallelism)
        res = run_job(job, MockTranslator())
        translated = res.manifests[args.target].total_count
    finally:
        if not args.work:
            shutil.rmtree(work, ignore_errors=True)
    out = {
        "records": args.records,
        "shard_size": args.shard_size,
        "translated": translated,
        "seconds": round(time.perf_counter() - started, 2),
        "peak_rss_mb": round(peak_rss_mb(), 2),
    }
    if args.json:
        print(json.dumps(out))
    else:
        print(f"{translated:,} records in {out['seconds']}s, peak RSS {out['peak_rss_mb']} MB "
              f"(shard size {args.shard_size:,})")


if __name__ == "__main__":
    main()
