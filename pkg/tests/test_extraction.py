import json
from pathlib import Path

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ser_returns.events import EventTriplet
from ser_returns.extraction import (
    ChatCompletionProvider,
    ParseError,
    ProviderError,
    ReplayProvider,
    SchemaError,
    article_key,
    extract_many,
    extract_with_retry,
    parse_events,
    render_prompt,
    serialize_events,
    validate_events,
)

FIXTURES = Path(__file__).parent / "fixtures"
ARTICLE = (FIXTURES / "oa2_article.txt").read_text(encoding="utf-8")
COMPLETION = (FIXTURES / "oa2_completion.txt").read_text(encoding="utf-8")


class Scripted:
    """Provider that plays back a list of responses; exceptions are raised."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def __call__(self, bundle):
        r = self.responses[min(self.calls, len(self.responses) - 1)]
        self.calls += 1
        if isinstance(r, Exception):
            raise r
        return r


class TestPrompt:
    def test_system_text_names_keys(self):
        b = render_prompt("Some article text.", "2020-01-02")
        for key in ("subject", "subject_link", "action", "object", "object_link", "context"):
            assert key in b.system_text

    def test_date_and_article_embedded(self):
        b = render_prompt(ARTICLE, "2017-04-20")
        assert "2017-04-20" in b.user_text
        assert ARTICLE.strip() in b.user_text

    def test_zero_shot_omits_examples(self):
        with_ex = render_prompt("Text here.", "2020-01-02")
        without = render_prompt("Text here.", "2020-01-02", examples=[])
        assert "OUTPUT:" in with_ex.user_text
        assert "OUTPUT:" not in without.user_text and "{examples}" not in without.user_text
        assert "\n\n\n" not in without.user_text

    def test_deterministic(self):
        assert render_prompt(ARTICLE, "2017-04-20") == render_prompt(ARTICLE, "2017-04-20")

    def test_empty_article(self):
        with pytest.raises(ValueError):
            render_prompt("  ", "2020-01-02")


class TestParse:
    def test_fixture(self):
        events = parse_events(COMPLETION)
        assert len(events) == 4
        assert events[0].subject == "President Trump"
        assert events[0].subject_link == "http://dbpedia.org/resource/Donald_Trump"

    def test_empty_array(self):
        assert parse_events("[]") == []

    def test_missing_action(self):
        with pytest.raises(SchemaError) as info:
            parse_events('[{"subject": "a", "object": "b", "context": "c"}]')
        assert (info.value.index, info.value.key) == (0, "action")

    def test_blank_key_second_event(self):
        good = {"subject": "a", "action": "b", "object": "c", "context": "d"}
        with pytest.raises(SchemaError) as info:
            parse_events(json.dumps([good, dict(good, object=" ")]))
        assert (info.value.index, info.value.key) == (1, "object")

    @pytest.mark.parametrize("raw", ["not json", "{", '{"a": 1}', "42"])
    def test_garbage(self, raw):
        with pytest.raises(ParseError):
            parse_events(raw)

    def test_comma_inside_string_kept(self):
        raw = '[{"subject": "a", "action": "b", "object": "c", "context": "x, }"},]'
        assert parse_events(raw)[0].context == "x, }"

    @given(st.lists(st.builds(
        EventTriplet,
        st.text(min_size=1).filter(str.strip),
        st.text(min_size=1).filter(str.strip),
        st.text(min_size=1).filter(str.strip),
        st.text(min_size=1).filter(str.strip),
        st.sampled_from([None, "http://dbpedia.org/resource/X"]),
        st.none(),
    ), max_size=5))
    def test_serialize_roundtrip(self, events):
        assert parse_events(serialize_events(events)) == events


class TestValidate:
    def test_fixture_clean(self):
        assert validate_events(parse_events(COMPLETION), ARTICLE) == []

    def test_blank_subject(self):
        ev = EventTriplet("", "buys", "firm", "firm buys")
        assert len(validate_events([ev], "firm buys")) == 1

    def test_bad_link(self):
        ev = EventTriplet("a", "b", "c", "a b c", subject_link="nope")
        assert [d.code for d in validate_events([ev], "a b c")] == ["bad-link"]

    def test_context_mismatch_non_fatal(self):
        ev = EventTriplet("a", "b", "c", "completely unrelated words")
        diags = validate_events([ev], "the quarterly earnings beat expectations")
        assert [d.code for d in diags] == ["context-mismatch"]
        assert not diags[0].fatal


class TestRetry:
    def test_first_attempt_ok(self):
        p = Scripted([COMPLETION])
        out = extract_with_retry(ARTICLE, "2017-04-20", p)
        assert out.ok and out.attempts == 1 and len(out.events) == 4 and p.calls == 1

    def test_garbage_discarded(self):
        p = Scripted(["garbage"])
        out = extract_with_retry(ARTICLE, "2017-04-20", p, max_attempts=3)
        assert out.status == "discarded" and out.attempts == 3 and p.calls == 3
        assert out.events == [] and len(out.diagnostics) == 3

    def test_two_failures_then_valid(self):
        p = Scripted([ProviderError("timeout"), "[{}]", COMPLETION])
        out = extract_with_retry(ARTICLE, "2017-04-20", p, max_attempts=3)
        assert out.ok and out.attempts == 3 and p.calls == 3

    def test_invalid_events_retry(self):
        bad = json.dumps([{"subject": "a", "action": "b", "object": "c", "context": "x", "subject_link": "bad"}])
        p = Scripted([bad, COMPLETION])
        out = extract_with_retry(ARTICLE, "2017-04-20", p)
        assert out.ok and out.attempts == 2

    def test_judge_rejection(self):
        out = extract_with_retry(ARTICLE, "2017-04-20", Scripted([COMPLETION]), max_attempts=2,
                                 judge=lambda events, article: False)
        assert out.status == "discarded" and out.attempts == 2

    def test_max_attempts_validated(self):
        with pytest.raises(ValueError):
            extract_with_retry(ARTICLE, "2017-04-20", Scripted([COMPLETION]), max_attempts=0)

    @given(st.integers(1, 6), st.integers(0, 8))
    def test_never_exceeds_max_attempts(self, max_attempts, n_fail):
        p = Scripted(["junk"] * n_fail + [COMPLETION])
        out = extract_with_retry(ARTICLE, "2017-04-20", p, max_attempts=max_attempts)
        assert p.calls <= max_attempts
        assert out.ok == (n_fail < max_attempts)
        assert out.attempts == (n_fail + 1 if out.ok else max_attempts)


class TestProviders:
    def test_replay_keyed_by_hash(self):
        p = ReplayProvider({article_key(ARTICLE): COMPLETION})
        assert extract_with_retry(ARTICLE, "2017-04-20", p).ok
        with pytest.raises(ProviderError):
            p(render_prompt("unknown article", "2020-01-01"))

    def test_replay_sequence(self):
        p = ReplayProvider({article_key(ARTICLE): ["junk", COMPLETION]})
        out = extract_with_retry(ARTICLE, "2017-04-20", p)
        assert out.attempts == 2

    def test_http_client(self):
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json={"choices": [{"message": {"content": COMPLETION}}]})

        client = httpx.Client(transport=httpx.MockTransport(handler))
        p = ChatCompletionProvider("http://llm.test/v1/chat/completions", "m", api_key="k", client=client)
        out = extract_with_retry(ARTICLE, "2017-04-20", p)
        assert out.ok
        assert seen["auth"] == "Bearer k"
        assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]
        assert seen["body"]["temperature"] == 0.0

    def test_http_error_is_failed_attempt(self):
        client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
        p = ChatCompletionProvider("http://llm.test/v1", "m", api_key="", client=client)
        out = extract_with_retry(ARTICLE, "2017-04-20", p, max_attempts=2)
        assert out.status == "discarded" and out.attempts == 2

    def test_extract_many_concurrent_matches_serial(self):
        items = [(ARTICLE, "2017-04-20"), ("unknown", "2017-04-21")]
        p = ReplayProvider({article_key(ARTICLE): COMPLETION})
        serial = extract_many(items, p)
        parallel = extract_many(items, p, max_in_flight=2)
        assert [o.status for o in serial] == [o.status for o in parallel] == ["ok", "discarded"]
