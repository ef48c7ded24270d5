"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s or -rA to see them).

The slow full-corpus decode-rate criterion runs last; everything else
finishes in well under a minute.
"""

import json
import random
import shutil
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from examflow import codec
from examflow.compose import ExamTemplate, StudentRecord, generate_batch, iter_exam_pages
from examflow.merge import merge_exercise_wise, merge_student_wise
from examflow.raster import RegionOfInterest, bresenham_line, write_page_png
from examflow.scores import GradeScheme, collect_scores, emit_distribution
from examflow.split import ingest_scan, split_batch

import synth
from pdfcheck import check_pdf_file
from test_raster import naive_line


def report(criterion, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    tail = f"  ({detail})" if detail else ""
    print(f"\nACCEPTANCE {criterion} {name}: {status}{tail}")
    assert ok, f"criterion {criterion} {name} failed: {detail}"


# --- criterion 2: codec roundtrip -------------------------------------------


def test_criterion_2_codec_roundtrip():
    rng = random.Random(20260811)
    alphabet = sorted(codec.CODE39_CHARSET - {"-"})
    failures = 0
    total = 0
    for _ in range(1000):
        payload = codec.PagePayload(
            student_id="".join(rng.choice(alphabet) for _ in range(rng.randint(4, 10))),
            exercise_no=rng.randint(1, 20),
            page_no=rng.randint(1, 30),
        )
        text = codec.serialize_payload(payload)
        for ratio in (2.0, 2.25, 3.0):
            runs = codec.code39_encode(text).widths(ratio)
            total += 2
            if codec.code39_decode(runs) != text:
                failures += 1
            if codec.code39_decode(list(reversed(runs))) != text:
                failures += 1
    report(
        2,
        "codec roundtrip 1000 payloads x ratios {2.0, 2.25, 3.0}",
        failures == 0,
        f"{total - failures}/{total} decodes exact",
    )


# --- criteria 3-5: pipeline inverse, partition law, pdf validity -------------

PIPELINE_TEMPLATE = ExamTemplate(
    source_text="Synthetic Exam\nCandidate: ##FirstName## ##LastName##",
    exercise_page_map=(1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8),  # 8 exercises, 15 pages
    barcode_roi=RegionOfInterest(0.0, 0.85, 1.0, 0.15),
    page_size_mm=(148.0, 210.0),
)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> render -> shuffle -> split -> merge for 20 students."""
    base = tmp_path_factory.mktemp("pipeline")
    roster = synth.corpus_roster(20)
    batch = generate_batch(PIPELINE_TEMPLATE, roster, base / "batch", dpi=150.0)
    assert batch.total_pages == 300

    scan = base / "scan"
    scan.mkdir()
    order = list(range(300))
    random.Random(42).shuffle(order)
    position = {page_idx: slot for slot, page_idx in enumerate(order)}
    i = 0
    for record in roster:
        for _, img in iter_exam_pages(PIPELINE_TEMPLATE, record, dpi=150.0):
            write_page_png(img, scan / f"scan-{position[i]:04d}.png", compress_level=1)
            i += 1

    tree = base / "tree"
    result = split_batch(ingest_scan(scan, dpi=150.0), roster, out_dir=tree, jobs=2)
    student_out = base / "student_wise"
    exercise_out = base / "exercise_wise"
    student_report = merge_student_wise(tree, student_out)
    exercise_report = merge_exercise_wise(tree, exercise_out)
    return {
        "base": base,
        "roster": roster,
        "batch": batch,
        "split": result,
        "student_report": student_report,
        "exercise_report": exercise_report,
    }


def test_criterion_3_pipeline_inverse(pipeline):
    batch = pipeline["batch"]
    manifest = json.loads(batch.manifest_path.read_text())
    expected = {s["student_id"]: s["payloads"] for s in manifest["students"]}

    split_ok = (
        len(pipeline["split"].filed) == 300
        and not pipeline["split"].quarantined
        and not pipeline["split"].duplicates
    )
    merged = {d["student_id"]: d["payloads"] for d in pipeline["student_report"].documents}
    exact = sum(merged.get(sid) == payloads for sid, payloads in expected.items())
    report(
        3,
        "pipeline inverse over 20 students x 15 pages",
        split_ok and exact == 20,
        f"{exact}/20 student page sequences reproduced exactly, "
        f"{len(pipeline['split'].filed)}/300 pages filed",
    )


def test_criterion_4_merge_partition_law(pipeline):
    student_docs = pipeline["student_report"].documents
    exercise_docs = pipeline["exercise_report"].documents
    students = {d["student_id"] for d in student_docs}
    ok = True
    for sid in students:
        student_pages = Counter(p for d in student_docs if d["student_id"] == sid for p in d["payloads"])
        exercise_pages = Counter(
            p for d in exercise_docs if d["student_id"] == sid for p in d["payloads"]
        )
        if student_pages != exercise_pages:
            ok = False
            break
    report(
        4,
        "exercise-wise outputs partition student-wise outputs",
        ok and len(students) == 20,
        f"multiset equality over {len(students)} students",
    )


def test_criterion_5_pdf_validity_and_determinism(pipeline, tmp_path):
    base = pipeline["base"]
    pdfs = sorted(base.rglob("*.pdf"))
    assert pdfs, "pipeline emitted no documents"
    checked = 0
    for pdf in pdfs:
        check_pdf_file(pdf)  # raises on any structural problem
        checked += 1

    rerun = tmp_path / "student_wise_again"
    merge_student_wise(base / "tree", rerun)
    identical = all(
        (rerun / p.name).read_bytes() == p.read_bytes()
        for p in sorted((base / "student_wise").glob("*.pdf"))
    )
    report(
        5,
        "pdf structural validity and byte determinism",
        checked > 0 and identical,
        f"{checked} documents validated, re-merge byte-identical",
    )


# --- criterion 6: bresenham oracle -------------------------------------------


def test_criterion_6_bresenham_oracle():
    rng = random.Random(1965)
    mismatches = 0
    for _ in range(10_000):
        p0 = (rng.randrange(1000), rng.randrange(1000))
        p1 = (rng.randrange(1000), rng.randrange(1000))
        if bresenham_line(p0, p1) != naive_line(p0, p1):
            mismatches += 1
    report(
        6,
        "bresenham matches naive rasterizer on 10000 random pairs",
        mismatches == 0,
        f"{10_000 - mismatches}/10000 exact",
    )


# --- criterion 7: scores ------------------------------------------------------


def test_criterion_7_scores_histogram_and_monotonicity(tmp_path):
    scheme = GradeScheme(
        thresholds=((0.9, "1.0"), (0.8, "2.0"), (0.65, "3.0"), (0.5, "4.0"), (0.0, "5.0")),
        exercise_max={e: 10.0 for e in range(1, 9)},
    )
    roster = synth.corpus_roster(250)
    rng = random.Random(7)
    files = []
    for exercise in range(1, 9):
        path = tmp_path / f"corrector-{exercise}.csv"
        rows = [f"{r.student_id};{exercise};{rng.randint(0, 10)}" for r in roster]
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        files.append(path)
    table = collect_scores(files, roster, scheme)
    counts = emit_distribution(table, tmp_path / "distribution.svg", None)

    rank = {label: i for i, (_, label) in enumerate(scheme.thresholds)}
    ordered = sorted((table.totals[sid], table.grades[sid]) for sid in table.student_ids)
    monotone = all(
        rank[hi_grade] <= rank[lo_grade]
        for (_, lo_grade), (_, hi_grade) in zip(ordered, ordered[1:])
    )
    report(
        7,
        "250-student histogram sums to roster and grades are monotone",
        sum(counts.values()) == 250 and monotone,
        f"counts {dict(counts)}",
    )


# --- criterion 8: config fidelity ---------------------------------------------

UPSTREAM_STUDENT_DATA_JSON = """{
  "student_data" : {
    "file_path" : "./participants.csv",
    "fieldnames" : ["LastName", "FirstName", "StudentID", "Email"],
    "key" : "StudentID"
  }
}
"""

UPSTREAM_ROSTER_ROW = "Vanaken;Hans;372048;hans.vanaken@some-uni.eu"


def test_criterion_8_config_fidelity(tmp_path):
    from examflow.compose import load_roster, load_student_data_config

    (tmp_path / "student_data.json").write_text(UPSTREAM_STUDENT_DATA_JSON, encoding="utf-8")
    (tmp_path / "participants.csv").write_text(UPSTREAM_ROSTER_ROW + "\n", encoding="utf-8")
    cfg = load_student_data_config(tmp_path / "student_data.json")
    records = load_roster(cfg)
    ok = (
        cfg.key == "StudentID"
        and cfg.fieldnames == ("LastName", "FirstName", "StudentID", "Email")
        and len(records) == 1
        and records[0].student_id == "372048"
        and records[0].values["Email"] == "hans.vanaken@some-uni.eu"
    )
    report(8, "documented config and roster row load verbatim", ok, "key = 372048")


# --- criterion 1: decode rate on the 3000-page perturbed corpus ---------------

CORPUS_SEED = 20260811
CORPUS_STUDENTS = 200  # x 15 pages = 3000
CHUNK = 100


def test_criterion_1_decode_rate_on_perturbed_corpus(tmp_path):
    roster = synth.corpus_roster(CORPUS_STUDENTS)
    page_map = synth.CORPUS_TEMPLATE.exercise_page_map
    per_exam = len(page_map)
    total = CORPUS_STUDENTS * per_exam

    rng = np.random.default_rng(CORPUS_SEED)
    skews = rng.uniform(-3.0, 3.0, total)
    flips = rng.random(total) < 0.5

    tasks = []
    truth = []
    for s in range(CORPUS_STUDENTS):
        for page_no, exercise_no in enumerate(page_map, start=1):
            idx = len(tasks)
            tasks.append(
                (s, exercise_no, page_no, CORPUS_SEED, float(skews[idx]), bool(flips[idx]))
            )
            truth.append(f"{roster[s].student_id}-{exercise_no}-{page_no}")

    filed = 0
    quarantined = 0
    misfiled = 0
    # generation pool and split's decode pool never overlap in lifetime
    for start in range(0, total, CHUNK):
        chunk_tasks = tasks[start : start + CHUNK]
        with ProcessPoolExecutor(max_workers=2) as gen_pool:
            pixel_arrays = list(gen_pool.map(synth.build_perturbed_page, chunk_tasks, chunksize=4))
        pages = [synth.PageImage(px, 300.0) for px in pixel_arrays]
        chunk_dir = tmp_path / f"chunk-{start:05d}"
        result = split_batch(
            pages,
            roster,
            skew_budget=3.0,
            out_dir=chunk_dir,
            jobs=2,
            png_compress_level=0,
        )
        for f in result.filed:
            if f.payload == truth[start + f.page_index]:
                filed += 1
            else:
                misfiled += 1
        quarantined += len(result.quarantined) + result.duplicate_extras
        del pages, pixel_arrays
        shutil.rmtree(chunk_dir)
        print(
            f"corpus {min(start + CHUNK, total)}/{total}: "
            f"filed {filed}, quarantined {quarantined}, misfiled {misfiled}",
            file=sys.stderr,
        )

    report(
        1,
        "perturbed 3000-page corpus files >= 2990 with zero misreads",
        filed >= 2990 and misfiled == 0,
        f"filed {filed}/{total}, quarantined {quarantined}, misfiled {misfiled}",
    )
