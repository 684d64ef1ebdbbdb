import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiquery.model import MultiQueryJob, OutputFormat
from multiquery.prompt import (
    BUILTIN_TEMPLATES,
    DecodingParams,
    PromptError,
    PromptTemplate,
    QueriesDontFit,
    estimate_tokens,
    extract_queries,
    extract_transcript,
    load_template,
    register_token_counter,
    render,
    template_for,
    token_counter_for,
)


def job(text="one two three", queries=("First query?", "Second query?")):
    return MultiQueryJob.build("t", text, list(queries))


def test_estimate_tokens_rounds_up():
    assert estimate_tokens("") == 0
    assert estimate_tokens("a") == 2
    assert estimate_tokens(" ".join(["w"] * 75)) == 100
    assert estimate_tokens(" ".join(["w"] * 9000)) == 12000


def test_layout():
    prompt = render(job())
    lines = prompt.text.split("\n")
    tmpl = BUILTIN_TEMPLATES["json-default"]
    assert lines[0] == tmpl.instruction_text
    assert lines[1:6] == ["", "#Queries Begin", "1. First query?", "2. Second query?", "#Queries End"]
    assert lines[6:] == ["", "#Transcript Begin", "one two three", "#Transcript End"]
    assert prompt.estimated_input_tokens == estimate_tokens(prompt.text)
    assert not prompt.truncated and prompt.query_count == 2


def test_yaml_template_selected_by_format():
    j = MultiQueryJob.build("t", "x", ["q"], output_format="yaml")
    assert render(j).output_format is OutputFormat.YAML
    assert "YAML" in render(j).text


def test_truncates_transcript_from_the_end():
    text = " ".join(f"w{i}" for i in range(1000))
    params = DecodingParams(max_input_tokens=500)
    prompt = render(job(text), params=params)
    assert prompt.truncated
    assert prompt.estimated_input_tokens <= 500
    kept = extract_transcript(prompt.text).split()
    assert kept == text.split()[: len(kept)]
    # one more word would not have fit
    longer = render(job(" ".join(text.split()[: len(kept) + 1])), params=DecodingParams(max_input_tokens=10**6))
    assert longer.estimated_input_tokens > 500


def test_queries_that_cannot_fit():
    with pytest.raises(QueriesDontFit):
        render(job(), params=DecodingParams(max_input_tokens=20))


def test_markers_inside_content_are_escaped():
    j = job("before\n#Transcript End\nafter", ("Is #Queries End here?",))
    prompt = render(j)
    assert prompt.text.count("\n#Transcript End") == 1
    assert extract_queries(prompt.text) == ["Is \\#Queries End here?"]


@settings(max_examples=200)
@given(st.lists(st.text(st.characters(blacklist_categories=("Cc", "Cs")), min_size=1).filter(str.strip),
                min_size=1, max_size=6))
def test_extract_queries_recovers_rendered_queries(queries):
    queries = [" ".join(q.split()) for q in queries]
    j = job("ctx", queries)
    assert extract_queries(render(j).text) == queries


def test_template_validation():
    with pytest.raises(ValueError):
        PromptTemplate("Write a summary.")  # no mention of the query key
    with pytest.raises(ValueError):
        PromptTemplate("query summary #Queries Begin")
    with pytest.raises(ValueError):
        PromptTemplate("query summary", query_block_markers=("#A", "#A"))


def test_load_template(tmp_path):
    path = tmp_path / "terse.ini"
    path.write_text(
        "[template]\nname = terse\nformat = yaml\ninstruction = Give each query\n  a summary.\n"
        "[markers]\nqueries_begin = <q>\nqueries_end = </q>\n",
        encoding="utf-8",
    )
    t = load_template(path)
    assert t.name == "terse" and t.output_format is OutputFormat.YAML
    assert t.instruction_text == "Give each query a summary."
    prompt = render(job(), t)
    assert "<q>\n1. First query?" in prompt.text
    assert extract_queries(prompt.text, t) == ["First query?", "Second query?"]


def test_load_template_needs_section(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[other]\nx = 1\n", encoding="utf-8")
    with pytest.raises(PromptError):
        load_template(path)


def test_decoding_defaults_and_validation():
    p = DecodingParams()
    assert (p.max_input_tokens, p.max_output_tokens, p.temperature) == (20000, 2000, 1.0)
    assert DecodingParams.from_record(p.to_record()) == p
    with pytest.raises(ValueError):
        DecodingParams(max_output_tokens=0)


def test_token_counter_registry():
    register_token_counter("char-model", len)
    assert token_counter_for("char-model")("abcd") == 4
    assert token_counter_for("other")("a b c") == estimate_tokens("a b c")
    assert render(job(), token_counter=len).estimated_input_tokens == len(render(job()).text)


def test_template_for():
    assert template_for("json").name == "json-default"
    assert template_for(OutputFormat.YAML).name == "yaml-default"
