import json
import os
import stat
import sys

import pytest

from examflow.compose import (
    DuplicateKey,
    ExamTemplate,
    FieldCountMismatch,
    InvalidKey,
    InvalidTemplate,
    RosterConfig,
    StudentRecord,
    ToolConfig,
    ToolFailed,
    ToolNotFound,
    UnknownMacro,
    compose_page_text,
    generate_batch,
    iter_exam_pages,
    load_roster,
    load_student_data_config,
    load_template,
    load_toolconfig,
    substitute_macros,
)
from examflow.raster import RegionOfInterest, locate_and_decode

from pdfcheck import check_pdf_file

LISTING5_FIELDS = ("LastName", "FirstName", "StudentID", "Email")
PAPER_ROW = "Vanaken;Hans;372048;hans.vanaken@some-uni.eu"


@pytest.fixture
def roster_cfg(tmp_path):
    csv = tmp_path / "participants.csv"
    csv.write_text(
        PAPER_ROW + "\n"
        "Mueller;Anna;500001;anna.mueller@some-uni.eu\n"
        "Smith;Jo;500002;jo.smith@some-uni.eu\n",
        encoding="utf-8",
    )
    return RosterConfig(file_path=csv, fieldnames=LISTING5_FIELDS, key="StudentID")


def small_template(pages=3):
    return ExamTemplate(
        source_text="Some Magical Computer Science Course 2\nCandidate: ##FirstName## ##LastName##",
        exercise_page_map=tuple(range(1, pages + 1)),
        barcode_roi=RegionOfInterest(0.0, 0.85, 1.0, 0.15),
    )


class TestRoster:
    def test_paper_example_row(self, roster_cfg):
        records = load_roster(roster_cfg)
        assert records[0].student_id == "372048"
        assert records[0].values["LastName"] == "Vanaken"
        assert records[0].values["Email"] == "hans.vanaken@some-uni.eu"

    def test_empty_file(self, tmp_path):
        csv = tmp_path / "empty.csv"
        csv.write_text("", encoding="utf-8")
        cfg = RosterConfig(file_path=csv, fieldnames=LISTING5_FIELDS, key="StudentID")
        assert load_roster(cfg) == []

    def test_duplicate_key(self, tmp_path):
        csv = tmp_path / "dup.csv"
        csv.write_text(PAPER_ROW + "\n" + PAPER_ROW + "\n", encoding="utf-8")
        cfg = RosterConfig(file_path=csv, fieldnames=LISTING5_FIELDS, key="StudentID")
        with pytest.raises(DuplicateKey):
            load_roster(cfg)

    def test_field_count_mismatch_reports_line(self, tmp_path):
        csv = tmp_path / "bad.csv"
        csv.write_text(PAPER_ROW + "\nOnly;Three;Fields\n", encoding="utf-8")
        cfg = RosterConfig(file_path=csv, fieldnames=LISTING5_FIELDS, key="StudentID")
        with pytest.raises(FieldCountMismatch, match=":2:"):
            load_roster(cfg)

    def test_invalid_key_hyphen(self, tmp_path):
        csv = tmp_path / "bad.csv"
        csv.write_text("Vanaken;Hans;37-20;x@y.eu\n", encoding="utf-8")
        cfg = RosterConfig(file_path=csv, fieldnames=LISTING5_FIELDS, key="StudentID")
        with pytest.raises(InvalidKey):
            load_roster(cfg)

    def test_file_order_preserved(self, roster_cfg):
        records = load_roster(roster_cfg)
        assert [r.student_id for r in records] == ["372048", "500001", "500002"]

    def test_config_key_must_be_fieldname(self, tmp_path):
        with pytest.raises(Exception):
            RosterConfig(file_path=tmp_path / "x.csv", fieldnames=("A", "B"), key="C")


class TestStudentDataConfig:
    def test_listing5_verbatim(self, tmp_path):
        # the upstream student_data.json format, loaded unmodified
        config_text = """{
  "student_data" : {
    "file_path" : "./participants.csv",
    "fieldnames" : ["LastName", "FirstName", "StudentID", "Email"],
    "key" : "StudentID"
  }
}
"""
        path = tmp_path / "student_data.json"
        path.write_text(config_text, encoding="utf-8")
        (tmp_path / "participants.csv").write_text(PAPER_ROW + "\n", encoding="utf-8")
        cfg = load_student_data_config(path)
        assert cfg.fieldnames == LISTING5_FIELDS
        assert cfg.key == "StudentID"
        records = load_roster(cfg)
        assert [r.student_id for r in records] == ["372048"]


class TestMacros:
    RECORD = StudentRecord(
        values={"LastName": "Vanaken", "FirstName": "Hans", "StudentID": "372048"},
        key_field="StudentID",
    )

    def test_paper_substitution(self):
        out = substitute_macros("Name: ##FirstName## ##LastName##", self.RECORD)
        assert out == "Name: Hans Vanaken"

    def test_no_macros_identity(self):
        text = "plain text, no substitutions ## here"
        assert substitute_macros(text, self.RECORD) == text

    def test_unknown_macro(self):
        with pytest.raises(UnknownMacro):
            substitute_macros("##Nickname##", self.RECORD)

    def test_case_sensitive(self):
        with pytest.raises(UnknownMacro):
            substitute_macros("##FIRSTNAME##", self.RECORD)

    def test_no_rescan_of_substituted_values(self):
        record = StudentRecord(
            values={"A": "##B##", "B": "x", "StudentID": "1"}, key_field="StudentID"
        )
        assert substitute_macros("##A##", record) == "##B##"


class TestTemplate:
    def test_empty_page_map_rejected(self):
        with pytest.raises(InvalidTemplate):
            ExamTemplate("t", (), RegionOfInterest(0, 0.85, 1, 0.15))

    def test_bad_exercise_number(self):
        with pytest.raises(InvalidTemplate):
            ExamTemplate("t", (0, 1), RegionOfInterest(0, 0.85, 1, 0.15))

    def test_macro_validation(self):
        t = ExamTemplate("##Nope##", (1,), RegionOfInterest(0, 0.85, 1, 0.15))
        with pytest.raises(InvalidTemplate):
            t.validate_macros(LISTING5_FIELDS)

    def test_load_template_roundtrip(self, tmp_path):
        path = tmp_path / "exam.json"
        path.write_text(
            json.dumps(
                {
                    "source_text": "Course ##FirstName##",
                    "exercise_page_map": [1, 1, 2],
                    "barcode_roi": {"x": 0.0, "y": 0.85, "w": 1.0, "h": 0.15},
                }
            ),
            encoding="utf-8",
        )
        t = load_template(path)
        assert t.page_count == 3
        assert t.exercise_page_map == (1, 1, 2)


class TestNativePages:
    def test_page_decodes_to_its_payload(self, roster_cfg):
        records = load_roster(roster_cfg)
        template = small_template(pages=2)
        pages = list(iter_exam_pages(template, records[0], dpi=200.0))
        assert [str(p.student_id) for p, _ in pages] == ["372048", "372048"]
        payload, img = pages[1]
        report = locate_and_decode(img, template.barcode_roi, 0.0)
        assert report.ok and report.payload == payload

    def test_personalization_isolation(self, roster_cfg):
        records = load_roster(roster_cfg)
        template = small_template()
        texts_a = compose_page_text(template, records[0], 1, 1)
        texts_b = compose_page_text(template, records[1], 1, 1)
        rendered_a = "\n".join(texts_a["header_lines"]) + texts_a["footer_line"]
        for field in ("LastName", "FirstName", "StudentID"):
            assert records[1].values[field] not in rendered_a
        assert records[0].values["FirstName"] in rendered_a
        assert records[1].values["FirstName"] in texts_b["footer_line"] or records[1].values[
            "FirstName"
        ] in "\n".join(texts_b["header_lines"])


class TestGenerateBatch:
    def test_three_students_counting(self, roster_cfg, tmp_path):
        records = load_roster(roster_cfg)
        template = small_template(pages=3)
        result = generate_batch(template, records, tmp_path / "build", dpi=150.0)
        assert result.total_pages == 9
        assert len(set(result.payloads)) == 9
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["page_count"] == 9
        assert [s["student_id"] for s in manifest["students"]] == ["372048", "500001", "500002"]
        assert check_pdf_file(result.document_path)["pages"] == 9

    def test_order_is_roster_times_pages(self, roster_cfg, tmp_path):
        records = load_roster(roster_cfg)
        template = small_template(pages=2)
        result = generate_batch(template, records, tmp_path / "build", dpi=150.0)
        assert list(result.payloads) == [
            "372048-1-1", "372048-2-2",
            "500001-1-1", "500001-2-2",
            "500002-1-1", "500002-2-2",
        ]

    def test_empty_roster(self, tmp_path):
        template = small_template()
        result = generate_batch(template, [], tmp_path / "build")
        assert result.total_pages == 0
        assert result.document_path.stat().st_size == 0
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["students"] == []

    def test_determinism(self, roster_cfg, tmp_path):
        records = load_roster(roster_cfg)[:1]
        template = small_template(pages=1)
        a = generate_batch(template, records, tmp_path / "a", dpi=150.0)
        b = generate_batch(template, records, tmp_path / "b", dpi=150.0)
        assert a.document_path.read_bytes() == b.document_path.read_bytes()


def _stub_tool(tmp_path, name, body):
    path = tmp_path / name
    path.write_text("#!" + sys.executable + "\n" + body, encoding="utf-8")
    path.chmod(path.stat().st_mode | stat.S_IXUSR)
    return path


class TestExternalMode:
    def test_external_pipeline_with_stub_tools(self, roster_cfg, tmp_path):
        records = load_roster(roster_cfg)
        template = small_template(pages=1)
        typesetter = _stub_tool(
            tmp_path,
            "fake_typesetter.py",
            "import sys, pathlib\n"
            "src = pathlib.Path(sys.argv[1])\n"
            "out = pathlib.Path(sys.argv[2])\n"
            "out.write_text('PDF-FOR ' + src.read_text())\n",
        )
        concat = _stub_tool(
            tmp_path,
            "fake_concat.py",
            "import sys, pathlib\n"
            "out = pathlib.Path(sys.argv[1])\n"
            "out.write_text(''.join(pathlib.Path(p).read_text() for p in sys.argv[2:]))\n",
        )
        tools = ToolConfig(
            tools={
                "typesetter": (sys.executable, str(typesetter), "{source}", "{output}"),
                "concatenator": (sys.executable, str(concat), "{output}", "{inputs}"),
            }
        )
        result = generate_batch(
            template, records, tmp_path / "build", mode="external", tools=tools
        )
        blob = result.document_path.read_text()
        # each student's substituted source went through the fake toolchain
        assert blob.count("PDF-FOR") == 3
        assert "Hans Vanaken" in blob and "Anna Mueller" in blob

    def test_tool_not_found(self, roster_cfg, tmp_path):
        records = load_roster(roster_cfg)
        template = small_template(pages=1)
        with pytest.raises(ToolNotFound):
            generate_batch(
                template, records, tmp_path / "build", mode="external", tools=ToolConfig(tools={})
            )
        tools = ToolConfig(tools={"typesetter": ("/no/such/binary", "{source}")})
        with pytest.raises(ToolNotFound):
            generate_batch(template, records, tmp_path / "build", mode="external", tools=tools)

    def test_tool_failed_captures_diagnostics(self, roster_cfg, tmp_path):
        records = load_roster(roster_cfg)
        template = small_template(pages=1)
        tools = ToolConfig(
            tools={
                "typesetter": (
                    sys.executable,
                    "-c",
                    "import sys; sys.stderr.write('kaboom'); sys.exit(3)",
                )
            }
        )
        with pytest.raises(ToolFailed, match="kaboom"):
            generate_batch(template, records, tmp_path / "build", mode="external", tools=tools)

    def test_load_toolconfig(self, tmp_path):
        path = tmp_path / "toolconfig.json"
        path.write_text(
            json.dumps(
                {
                    "tools": {
                        "rasterizer": {"command": ["gs", "-o", "{outdir}/p-%04d.png", "{input}"]},
                        "typesetter": ["latexmk", "-pdf", "{source}"],
                    }
                }
            ),
            encoding="utf-8",
        )
        tools = load_toolconfig(path)
        assert tools.command("rasterizer")[0] == "gs"
        assert tools.command("typesetter") == ("latexmk", "-pdf", "{source}")
        assert tools.command("missing") is None
