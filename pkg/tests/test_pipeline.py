import pytest

from mmplan.backends.base import BackendRequest, BackendSet, Capability
from mmplan.backends.mock import MockBackend, build_mock_png, read_provenance
from mmplan.core.types import CandidateImage, DescriptionRecord, MultimodalGoal
from mmplan.errors import ConfigError, PipelineError, TransportError
from mmplan.pipeline.planner import (
    PipelineConfig,
    Planner,
    parse_description,
    parse_numbered_steps,
)
from mmplan.pipeline.templates import TemplateLibrary

TPL = TemplateLibrary()
GOAL = MultimodalGoal(goal_text="How to make tomato chutney?", task_id="chutney")


def make_planner(tmp_path, backends, **config):
    return Planner(
        backends=backends,
        templates=TPL,
        run_dir=tmp_path / "run",
        config=PipelineConfig(**config),
    )


class RecordingBackend:
    """Delegates to a MockBackend while capturing every request."""

    def __init__(self, seed=0):
        self.inner = MockBackend(seed=seed)
        self.requests: list[BackendRequest] = []

    def invoke(self, request):
        self.requests.append(request)
        return self.inner.invoke(request)


class FlakyBackend:
    """Fails matching requests a fixed number of times, then delegates."""

    def __init__(self, should_fail, times=1, seed=0):
        self.inner = MockBackend(seed=seed)
        self.should_fail = should_fail
        self.budget = times
        self.failures = 0

    def invoke(self, request):
        if self.budget > 0 and self.should_fail(request):
            self.budget -= 1
            self.failures += 1
            raise TransportError("simulated failure")
        return self.inner.invoke(request)


class GarbageChat:
    def __init__(self, text="no numbered steps here"):
        self.text = text
        self.calls = 0

    def invoke(self, request):
        self.calls += 1
        from mmplan.backends.base import BackendResponse

        return BackendResponse(text=self.text)


class TestStepParsing:
    def test_basic(self):
        texts, events = parse_numbered_steps("1. First\n2. Second\n3. Third")
        assert texts == ["First", "Second", "Third"] and events == []

    def test_skipped_numbers_renumbered_with_event(self):
        texts, events = parse_numbered_steps("1. A\n\n3. B")
        assert texts == ["A", "B"]
        assert events and "renumbered" in events[0]

    def test_preamble_dropped(self):
        texts, _ = parse_numbered_steps("Sure, here is a plan:\nIt will be great.\n1. Do it\n2. Done")
        assert texts == ["Do it", "Done"]

    def test_multiline_bodies_attach(self):
        texts, _ = parse_numbered_steps("1. Start the dough\nwith cold butter\n2. Bake")
        assert texts == ["Start the dough with cold butter", "Bake"]

    def test_paren_numbering(self):
        texts, _ = parse_numbered_steps("1) Alpha\n2) Beta")
        assert texts == ["Alpha", "Beta"]

    def test_no_steps(self):
        texts, _ = parse_numbered_steps("no numbers at all")
        assert texts == []


class TestDescriptionParsing:
    FULL = (
        "Description: Mixing the butter.\n"
        "Before:\n- Butter is cold.\n- Flour is dry.\n"
        "After:\n- Mixture is crumbly.\n"
        "Image Description: A bowl of crumbly mixture."
    )

    def test_full_blocks(self):
        rec = parse_description(self.FULL, "osrcot")
        assert rec.step_detail == "Mixing the butter."
        assert rec.before_states == ("Butter is cold.", "Flour is dry.")
        assert rec.after_states == ("Mixture is crumbly.",)
        assert rec.image_description == "A bowl of crumbly mixture."

    def test_case_insensitive_headers(self):
        rec = parse_description(self.FULL.replace("Image Description:", "IMAGE DESCRIPTION:"), "osrcot")
        assert rec.image_description == "A bowl of crumbly mixture."

    def test_full_missing_blocks_returns_none(self):
        assert parse_description("Image Description: only this", "osrcot") is None
        assert parse_description("Description: d\nBefore:\n- b", "osrcot") is None

    def test_v1_whole_text(self):
        rec = parse_description("Answer: A pan with oil.", "v1")
        assert rec.image_description == "A pan with oil."
        assert rec.before_states == () and rec.step_detail == ""

    def test_v2_block_or_text(self):
        assert parse_description("Image Description: X.", "v2").image_description == "X."
        assert parse_description("just an answer", "v2").image_description == "just an answer"

    def test_v3_needs_detail_and_image(self):
        rec = parse_description("Description: doing it\nImage Description: the image", "v3")
        assert rec.step_detail == "doing it"
        assert parse_description("Image Description: no detail", "v3") is None

    def test_multiline_image_description_joined(self):
        rec = parse_description("Image Description:\nline one\nline two", "v2")
        assert rec.image_description == "line one line two"


class TestConfigValidation:
    def test_k_bounds(self):
        with pytest.raises(ConfigError):
            PipelineConfig(k=0)
        with pytest.raises(ConfigError):
            PipelineConfig(k=65)

    def test_stage_dependencies(self):
        with pytest.raises(ConfigError):
            PipelineConfig(stages=("describe",))
        with pytest.raises(ConfigError):
            PipelineConfig(stages=("text", "describe", "select"))
        PipelineConfig(stages=("text",))
        PipelineConfig(stages=("text", "describe"))

    def test_unknown_stage(self):
        with pytest.raises(ConfigError):
            PipelineConfig(stages=("text", "deploy"))


class TestVisualGoal:
    def test_mock_goal_image_provenance_is_goal_text(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=2)
        goal_text = "How to make garlic pull-apart bread?"
        rel = planner.generate_visual_goal(goal_text)
        blob = (planner.run_dir / rel).read_bytes()
        assert read_provenance(blob) == goal_text

    def test_backend_failure_degrades_to_text_only(self, tmp_path):
        flaky = FlakyBackend(lambda r: r.capability is Capability.TEXT_TO_IMAGE, times=99)
        backends = BackendSet(chat=MockBackend(), t2i=flaky, embed=MockBackend(), models={})
        planner = make_planner(tmp_path, backends, k=2, stages=("text",))
        plan = planner.run(GOAL)
        assert plan.goal.goal_image is None
        assert any("goal image" in e for e in planner.events)
        assert len(plan.steps) >= 1

    def test_no_t2i_backend_skips_goal_image(self, tmp_path):
        backends = BackendSet(chat=MockBackend(), models={})
        planner = make_planner(tmp_path, backends, stages=("text",))
        plan = planner.run(GOAL)
        assert plan.goal.goal_image is None


class TestTextualPlan:
    def test_mock_plan_has_numbered_steps(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=2)
        texts = planner.generate_textual_plan(GOAL)
        assert len(texts) >= 3

    def test_unparseable_output_errors_after_3_attempts(self, tmp_path):
        chat = GarbageChat()
        backends = BackendSet(chat=chat, models={})
        planner = make_planner(tmp_path, backends, stages=("text",))
        with pytest.raises(PipelineError):
            planner.generate_textual_plan(GOAL)
        assert chat.calls == 3

    def test_overlong_step_recorded_not_truncated(self, tmp_path):
        long_step = "stir " * 60
        chat = GarbageChat(f"1. {long_step.strip()}\n2. short one")
        backends = BackendSet(chat=chat, models={})
        planner = make_planner(tmp_path, backends, stages=("text",))
        texts = planner.generate_textual_plan(GOAL)
        assert len(texts[0].split()) == 60  # kept verbatim
        assert any("exceeds 50 words" in e for e in planner.events)


class TestDescriptions:
    def test_prev_steps_capped_and_causal(self, tmp_path):
        recorder = RecordingBackend()
        backends = BackendSet(chat=recorder, models={})
        planner = make_planner(tmp_path, backends, k=2)
        prev = [f"step number {i}" for i in range(1, 16)]
        planner.generate_image_description(GOAL, "16. the current step", prev)
        prompt = recorder.requests[-1].last_user_text()
        import re

        block = re.findall(r"\[prev_steps\]:(.*?)\nDescription:", prompt, re.DOTALL)[-1]
        rendered = re.findall(r"(\d+)\. step number", block)
        assert len(rendered) == 10
        assert rendered == [str(i) for i in range(6, 16)]

    def test_parse_failure_falls_back_to_step_text(self, tmp_path):
        chat = GarbageChat("not a structured answer")
        backends = BackendSet(chat=chat, models={})
        planner = make_planner(tmp_path, backends, k=2)
        rec = planner.generate_image_description(GOAL, "7. stir the pot", ["fill the pot"])
        assert rec.image_description == "7. stir the pot"
        assert chat.calls == 3
        assert any("using raw step text" in e for e in planner.events)

    def test_variant_v1_record_shape(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=2, variant="v1")
        rec = planner.generate_image_description(GOAL, "2. chop the tomatoes", ["wash tomatoes"])
        assert rec.before_states == () and rec.after_states == () and rec.step_detail == ""
        assert rec.image_description


class TestSampling:
    def test_k_distinct_candidates(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=20)
        rec = DescriptionRecord(image_description="a bowl of mixture")
        candidates = planner.sample_step_images(1, rec)
        assert len(candidates) == 20
        blobs = {(planner.run_dir / c.image).read_bytes() for c in candidates}
        assert len(blobs) == 20  # distinct seeds, distinct pixels

    def test_k1_single_candidate(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=1)
        candidates = planner.sample_step_images(1, DescriptionRecord(image_description="d"))
        assert [c.k for c in candidates] == [1]

    def test_persistent_failure_drops_candidate(self, tmp_path):
        flaky = FlakyBackend(
            lambda r: r.capability is Capability.TEXT_TO_IMAGE and r.params.get("seed") == 3,
            times=2,  # both the try and its retry
        )
        backends = BackendSet(t2i=flaky, embed=MockBackend(), models={})
        planner = make_planner(tmp_path, backends, k=5)
        candidates = planner.sample_step_images(2, DescriptionRecord(image_description="d"))
        assert [c.k for c in candidates] == [1, 2, 4, 5]
        assert any("dropped" in e for e in planner.events)

    def test_transient_failure_recovers_via_retry(self, tmp_path):
        flaky = FlakyBackend(
            lambda r: r.capability is Capability.TEXT_TO_IMAGE and r.params.get("seed") == 3,
            times=1,
        )
        backends = BackendSet(t2i=flaky, embed=MockBackend(), models={})
        planner = make_planner(tmp_path, backends, k=5)
        candidates = planner.sample_step_images(2, DescriptionRecord(image_description="d"))
        assert len(candidates) == 5

    def test_zero_survivors_is_error(self, tmp_path):
        flaky = FlakyBackend(lambda r: True, times=10**6)
        backends = BackendSet(t2i=flaky, models={})
        planner = make_planner(tmp_path, backends, k=2)
        with pytest.raises(PipelineError):
            planner.sample_step_images(1, DescriptionRecord(image_description="d"))


class TestSelection:
    def write_candidates(self, planner, prompts):
        candidates = []
        for k, prompt in enumerate(prompts, start=1):
            rel = f"images/step_1_cand_{k}.png"
            path = planner.run_dir / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(build_mock_png(prompt, seed=k))
            candidates.append(CandidateImage(k=k, image=rel))
        return candidates

    def test_exact_provenance_match_wins(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=5)
        desc = DescriptionRecord(image_description="a crumbly butter mixture in a bowl")
        prompts = [
            "a crumbly butter mixture in a bowl extra words here",
            "completely unrelated scene with planets",
            "a crumbly butter mixture in a bowl",  # exact match, k=3
            "a crumbly mixture",
            "butter in a bowl",
        ]
        candidates = self.write_candidates(planner, prompts)
        selected, scored = planner.select_step_image(candidates, desc)
        assert selected == 3
        sims = {c.k: c.similarity for c in scored}
        assert sims[3] == pytest.approx(1.0, abs=1e-9)
        assert all(sims[3] >= s for s in sims.values())

    def test_tie_breaks_to_lowest_k(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=3)
        desc = DescriptionRecord(image_description="identical prompt")
        candidates = self.write_candidates(
            planner, ["identical prompt", "identical prompt", "different thing"]
        )
        selected, scored = planner.select_step_image(candidates, desc)
        assert selected == 1

    def test_k1_forced_selection(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=1)
        desc = DescriptionRecord(image_description="solo")
        candidates = self.write_candidates(planner, ["solo"])
        selected, _ = planner.select_step_image(candidates, desc)
        assert selected == 1

    def test_embedding_failure_excludes_candidate(self, tmp_path):
        flaky = FlakyBackend(
            lambda r: r.capability is Capability.EMBED and r.all_images(), times=1
        )
        backends = BackendSet(embed=flaky, models={})
        planner = make_planner(tmp_path, backends, k=2)
        desc = DescriptionRecord(image_description="target")
        candidates = self.write_candidates(planner, ["target", "target"])
        selected, scored = planner.select_step_image(candidates, desc)
        assert selected == 2  # k=1 failed embedding, excluded
        assert scored[0].similarity is None

    def test_all_excluded_falls_back_to_first(self, tmp_path):
        flaky = FlakyBackend(
            lambda r: r.capability is Capability.EMBED and r.all_images(), times=10**6
        )
        backends = BackendSet(embed=flaky, models={})
        planner = make_planner(tmp_path, backends, k=2)
        desc = DescriptionRecord(image_description="target")
        candidates = self.write_candidates(planner, ["a", "b"])
        selected, _ = planner.select_step_image(candidates, desc)
        assert selected == 1
        assert any("all candidate embeddings failed" in e for e in planner.events)


class TestEndToEnd:
    def test_stage_counts(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=3)
        plan = planner.run(GOAL)
        assert len(plan.steps) == 4  # ceil(28/8)
        assert all(len(s.candidates) == 3 for s in plan.steps)
        assert all(s.selected is not None for s in plan.steps)
        pngs = list((planner.run_dir / "images").glob("step_*_cand_*.png"))
        assert len(pngs) == 12

    def test_text_only_stages(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), stages=("text",), goal_image=False)
        plan = planner.run(GOAL)
        assert plan.steps and all(s.description is None for s in plan.steps)
        assert all(s.candidates == () for s in plan.steps)

    def test_selection_optimality_invariant(self, tmp_path, backend_factory):
        planner = make_planner(tmp_path, backend_factory(), k=4)
        plan = planner.run(GOAL)
        for step in plan.steps:
            chosen = step.selected_candidate()
            assert chosen.similarity is not None
            for cand in step.candidates:
                if cand.similarity is not None:
                    assert chosen.similarity >= cand.similarity

    def test_recorded_similarity_matches_recorded_embeddings(self, tmp_path, backend_factory):
        import numpy as np

        from mmplan.backends.mock import embed_text

        planner = make_planner(tmp_path, backend_factory(), k=3)
        plan = planner.run(GOAL)
        for step in plan.steps:
            desc = np.asarray(embed_text(step.description.image_description))
            desc = desc / np.linalg.norm(desc)
            for cand in step.candidates:
                if cand.similarity is None:
                    continue
                recomputed = float(np.asarray(cand.embedding) @ desc)
                assert abs(recomputed - cand.similarity) <= 1e-9

    def test_prompt_causality_only_earlier_steps_in_context(self, tmp_path):
        import re

        recorder = RecordingBackend()
        backends = BackendSet(chat=recorder, embed=MockBackend(), t2i=MockBackend(), models={})
        planner = make_planner(tmp_path, backends, k=1, goal_image=False)
        plan = planner.run(GOAL)
        texts = [s.text for s in plan.steps]
        osr_prompts = [
            r.last_user_text()
            for r in recorder.requests
            if "[prev_steps]:" in r.last_user_text()
        ]
        assert len(osr_prompts) == len(plan.steps)
        for i, prompt in enumerate(osr_prompts, start=1):
            block = re.findall(r"\[prev_steps\]:(.*?)\nDescription:", prompt, re.DOTALL)[-1]
            numbers = [int(n) for n in re.findall(r"^\s*(\d+)\. ", block, re.MULTILINE)]
            assert all(j < i for j in numbers)
            assert len(numbers) <= 10
            for j in numbers:
                assert texts[j - 1] in block

    def test_determinism_same_seed_same_plan(self, tmp_path, backend_factory):
        from mmplan.core.serialization import dump_json, plan_to_doc

        p1 = make_planner(tmp_path / "a", backend_factory(seed=3, cache=False), k=2, seed=3).run(GOAL)
        p2 = make_planner(tmp_path / "b", backend_factory(seed=3, cache=False), k=2, seed=3).run(GOAL)
        assert dump_json(plan_to_doc(p1)) == dump_json(plan_to_doc(p2))

    def test_manifest_written_with_calls(self, tmp_path, backend_factory):
        from mmplan.core.serialization import load_manifest

        planner = make_planner(tmp_path, backend_factory(), k=2, stages=("text",), goal_image=False)
        planner.run(GOAL)
        manifest = load_manifest(planner.run_dir)
        assert manifest.status == "plan_complete"
        assert manifest.backend_calls["total"] >= 1
        assert "plan.json" in manifest.files
