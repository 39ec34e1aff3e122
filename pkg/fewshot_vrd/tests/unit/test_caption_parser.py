import time

import pytest

from app.core.errors import ConfigurationError
from app.models.schemas import Caption, Tag, TaggedToken
from app.services.caption_parser import (
    Lexicon,
    extract_triplets,
    format_triplets_tsv,
    load_lexicon,
    normalize_phrase,
    parse_caption,
    parse_corpus,
    read_triplets_tsv,
    tag_tokens,
    tokenize,
)

DOG_CAPTION = "A little cute dog on the sofa is eating an apple"


def _triplets(text, lexicon, source="c"):
    return {t.key() for t in parse_caption(Caption(id=source, text=text), lexicon)}


class TestTokenize:
    def test_strips_punctuation(self):
        assert tokenize("A dog.") == ["a", "dog"]

    def test_empty(self):
        assert tokenize("") == []
        assert tokenize(" ,.! ") == []

    def test_dog_caption_has_eleven_tokens(self):
        assert len(tokenize(DOG_CAPTION)) == 11

    def test_accented_letters_stay_in_the_word(self):
        assert tokenize("A jalapeño on the Café table") == ["a", "jalapeño", "on", "the", "café", "table"]

    def test_underscores_split(self):
        assert tokenize("is_eating") == ["is", "eating"]


class TestTagging:
    def test_direct_lookup(self):
        lex = Lexicon({"dog": Tag.NOUN})
        assert tag_tokens(["dog"], lex) == [TaggedToken(surface="dog", tag=Tag.NOUN)]

    def test_ing_suffix(self):
        lex = Lexicon({"dog": Tag.NOUN})
        assert tag_tokens(["eating"], lex)[0].tag is Tag.VERB

    def test_plural_suffix_needs_known_stem(self):
        lex = Lexicon({"dog": Tag.NOUN, "bench": Tag.NOUN})
        tags = [t.tag for t in tag_tokens(["dogs", "benches", "blorps"], lex)]
        assert tags == [Tag.NOUN, Tag.NOUN, Tag.OTHER]

    def test_dog_caption_gold_tags(self, lexicon):
        tags = [t.tag for t in tag_tokens(tokenize(DOG_CAPTION), lexicon)]
        assert tags == [
            Tag.DET, Tag.ADJ, Tag.ADJ, Tag.NOUN, Tag.ADP, Tag.DET,
            Tag.NOUN, Tag.AUX, Tag.VERB, Tag.DET, Tag.NOUN,
        ]

    def test_lexicon_nouns_ending_in_ing_stay_nouns(self, lexicon):
        assert tag_tokens(["building", "ceiling"], lexicon)[0].tag is Tag.NOUN

    def test_missing_lexicon_is_configuration_error(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_lexicon(tmp_path / "absent.tsv")

    def test_bad_tag_is_configuration_error(self, tmp_path):
        path = tmp_path / "lex.tsv"
        path.write_text("dog\tANIMAL\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="unknown tag"):
            load_lexicon(path)


class TestNormalizePhrase:
    def test_head_noun(self, lexicon):
        assert normalize_phrase(tag_tokens(tokenize("a little cute dog"), lexicon), lexicon) == "dog"

    def test_plural(self, lexicon):
        assert normalize_phrase(tag_tokens(["dogs"], lexicon), lexicon) == "dog"

    def test_es_plural_and_compound(self, lexicon):
        assert normalize_phrase(tag_tokens(tokenize("the kitchen tables"), lexicon), lexicon) == "table"
        assert normalize_phrase(tag_tokens(["benches"], lexicon), lexicon) == "bench"

    def test_words_ending_in_s_are_not_stripped(self, lexicon):
        assert normalize_phrase(tag_tokens(["grass"], lexicon), lexicon) == "grass"
        assert normalize_phrase(tag_tokens(["bus"], lexicon), lexicon) == "bus"

    def test_no_noun_rejected(self, lexicon):
        assert normalize_phrase(tag_tokens(["the", "red"], lexicon), lexicon) is None

    @pytest.mark.parametrize("phrase", ["a little cute dog", "dogs", "the kitchen tables", "benches", "grass", "horses"])
    def test_idempotent(self, lexicon, phrase):
        once = normalize_phrase(tag_tokens(tokenize(phrase), lexicon), lexicon)
        twice = normalize_phrase(tag_tokens([once], lexicon), lexicon)
        assert once == twice


class TestExtraction:
    def test_dog_caption_exact(self, lexicon):
        assert _triplets(DOG_CAPTION, lexicon) == {("dog", "on", "sofa"), ("dog", "is_eating", "apple")}

    def test_no_pattern(self, lexicon):
        assert _triplets("the red apple", lexicon) == set()

    def test_gold_corpus(self, lexicon, gold_captions):
        started = time.perf_counter()
        for entry in gold_captions:
            got = _triplets(entry["text"], lexicon, entry["id"])
            assert got == {tuple(t) for t in entry["triplets"]}, entry["id"]
        assert time.perf_counter() - started < 1.0

    def test_duplicates_within_caption_removed(self, lexicon):
        triplets = parse_caption(Caption(id="d", text="a dog on a sofa and a dog on a sofa"), lexicon)
        assert [t.key() for t in triplets] == [("dog", "on", "sofa")]

    def test_aux_only_verb_group_emits_nothing(self, lexicon):
        assert _triplets("the dog is a pet", lexicon) == set()

    def test_source_is_caption_id(self, lexicon):
        triplets = extract_triplets(tag_tokens(tokenize(DOG_CAPTION), lexicon), "img-9", lexicon)
        assert {t.source for t in triplets} == {"img-9"}

    def test_deterministic(self, lexicon):
        first = parse_caption(Caption(id="x", text=DOG_CAPTION), lexicon)
        second = parse_caption(Caption(id="x", text=DOG_CAPTION), lexicon)
        assert first == second

    def test_blank_caption_rejected(self):
        with pytest.raises(ValueError):
            Caption(id="x", text="   ")


class TestCorpus:
    def test_sorted_by_caption_then_triplet(self, lexicon, gold_captions):
        captions = [Caption(id=e["id"], text=e["text"]) for e in reversed(gold_captions)]
        triplets = parse_corpus(captions, lexicon)
        keys = [(t.source, t.key()) for t in triplets]
        assert keys == sorted(keys)
        assert len(triplets) == sum(len(e["triplets"]) for e in gold_captions)

    def test_parallel_matches_serial(self, lexicon, gold_captions):
        captions = [Caption(id=e["id"], text=e["text"]) for e in gold_captions]
        assert parse_corpus(captions, lexicon, n_jobs=2) == parse_corpus(captions, lexicon, n_jobs=1)

    def test_tsv_rows(self, lexicon):
        triplets = parse_corpus([Caption(id="c01", text=DOG_CAPTION)], lexicon)
        assert format_triplets_tsv(triplets) == "dog\tis_eating\tapple\tc01\ndog\ton\tsofa\tc01\n"

    def test_tsv_reads_back(self, tmp_path):
        path = tmp_path / "trip.tsv"
        path.write_text("dog\ton\tsofa\tc1\n\nman\triding\thorse\tc2\n", encoding="utf-8")
        assert [t.key() for t in read_triplets_tsv(path)] == [("dog", "on", "sofa"), ("man", "riding", "horse")]

    def test_tsv_empty_field_names_the_line(self, tmp_path):
        path = tmp_path / "trip.tsv"
        path.write_text("dog\ton\tsofa\tc1\ndog\t\tapple\tc2\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match=r"trip.tsv:2: predicate"):
            read_triplets_tsv(path)
