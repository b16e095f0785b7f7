//! Shared fixtures: seeded synthetic corpora in three registers, and a small
//! ready-to-use steering setup over them.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stylesteer::metrics::StyleLexicon;
use stylesteer::{
    build_prior, build_vocabulary, MixtureWeights, ReferenceLm, ReferenceLmConfig, SmoothingConfig, StylePrior,
    TokenizedCorpus, TokenizerSpec, Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Register {
    /// Plain modern narration; stands in for the base model's training text.
    Plain,
    /// Archaic chivalric romance.
    Chivalric,
    /// Wire-service news.
    Newswire,
}

struct Grammar {
    templates: &'static [&'static str],
    subj: &'static [&'static str],
    noun: &'static [&'static str],
    verb: &'static [&'static str],
    adj: &'static [&'static str],
    adv: &'static [&'static str],
    conj: &'static [&'static str],
}

const PLAIN: Grammar = Grammar {
    templates: &[
        "$s $v the $a $n .",
        "$s $v the $n and $v the $n .",
        "at the edge of the $n , $s $v a $a $n .",
        "$s $x $v that the $n was $a .",
        "by the time $s $v the $n , it was $a .",
        "there are three $a reasons why the $n is $a .",
        "\" are you sure ? \" $s asked , and $s $v the $n .",
        "first , $s $v the $a idea of the $n .",
        "$c $s $v the $n , the $n was $x $a .",
        "in recent years , the $n has been $a , $c $s $v it .",
    ],
    subj: &["she", "he", "they", "we", "the man", "the woman", "everyone", "nobody", "the system"],
    noun: &[
        "city",
        "moment",
        "place",
        "mistake",
        "evening",
        "decision",
        "chance",
        "reason",
        "issue",
        "trend",
        "point",
        "situation",
        "detail",
        "method",
        "section",
        "approach",
        "example",
        "component",
        "noise",
        "light",
        "room",
        "door",
        "street",
        "car",
        "letter",
        "morning",
        "friend",
        "house",
        "problem",
        "answer",
    ],
    verb: &[
        "remembered",
        "noticed",
        "promised",
        "returned",
        "carried",
        "opened",
        "closed",
        "found",
        "saw",
        "made",
        "changed",
        "explained",
        "compared",
        "understood",
        "followed",
        "wanted",
        "asked",
        "said",
        "took",
        "left",
    ],
    adj: &[
        "quiet",
        "important",
        "unusual",
        "practical",
        "basic",
        "main",
        "different",
        "late",
        "small",
        "large",
        "old",
        "new",
        "simple",
        "clear",
        "strange",
        "early",
        "dark",
        "bright",
    ],
    adv: &["quietly", "really", "simply", "clearly", "finally", "suddenly", "already", "still"],
    conj: &["when", "because", "although", "after", "before", "while"],
};

const CHIVALRIC: Grammar = Grammar {
    templates: &[
        "and $s $v the $a $n , for such was the custom of $a $n .",
        "verily , $s $v unto the $n , and $s $v the $n of the $a $n .",
        "$c $s had $v the $n , $s $v thereof with $a $n .",
        "o $a $n , quoth $s , wherefore dost thou $v the $n ?",
        "thus $s $v forth upon the $n , $x seeking $a $n .",
        "now it befell that $s $v a $a $n hard by the $n .",
        "forsooth , $s $v , the $n of $a $n doth $v me .",
        "$s $v the $n , and the $n $v $x , as is the wont of $a knights .",
    ],
    subj: &[
        "the knight",
        "sancho",
        "the squire",
        "my lady",
        "the enchanter",
        "the innkeeper",
        "thy servant",
        "he",
        "she",
    ],
    noun: &[
        "windmill",
        "steed",
        "lance",
        "adventure",
        "valour",
        "castle",
        "damsel",
        "giant",
        "inn",
        "road",
        "master",
        "helmet",
        "shield",
        "honour",
        "chivalry",
        "enchantment",
        "island",
        "goatherd",
        "barber",
        "curate",
        "courage",
        "fortune",
        "sorrow",
        "errantry",
        "villain",
    ],
    verb: &[
        "beheld",
        "spake",
        "vowed",
        "sallied",
        "smote",
        "besought",
        "bewailed",
        "encountered",
        "rode",
        "avenged",
        "perceived",
        "wrought",
        "bestowed",
        "craved",
        "forsook",
    ],
    adj: &[
        "valiant",
        "woeful",
        "errant",
        "noble",
        "wondrous",
        "doleful",
        "peerless",
        "base",
        "courteous",
        "grievous",
        "renowned",
        "lean",
        "faithful",
        "enchanted",
    ],
    adv: &["straightway", "forthwith", "right", "sorely", "mightily", "anon", "withal"],
    conj: &["whereas", "albeit", "ere", "inasmuch as", "whilst"],
};

const NEWSWIRE: Grammar = Grammar {
    templates: &[
        "$s $v on tuesday that the $a $n would rise by 3 percent .",
        "the $n $v $a $n , according to $s .",
        "$s said the $n was $x $a amid $a $n .",
        "shares of the $n $v after $s $v the $a $n .",
        "officials $v the $n , $s told reporters on monday .",
        "the $a $n $v $x in the third quarter , $s said .",
        "$c the $n $v , analysts $v a $a $n .",
    ],
    subj: &[
        "officials",
        "the ministry",
        "a spokesman",
        "analysts",
        "the agency",
        "the company",
        "investors",
        "regulators",
    ],
    noun: &[
        "market",
        "government",
        "economy",
        "budget",
        "inflation",
        "rate",
        "index",
        "merger",
        "election",
        "parliament",
        "deficit",
        "output",
        "forecast",
        "policy",
        "exports",
        "bank",
        "sector",
        "outlook",
        "earnings",
        "tariff",
    ],
    verb: &[
        "announced",
        "reported",
        "rose",
        "fell",
        "approved",
        "rejected",
        "forecast",
        "confirmed",
        "cut",
        "raised",
        "warned",
        "expected",
        "estimated",
        "slowed",
    ],
    adj: &[
        "quarterly",
        "annual",
        "federal",
        "economic",
        "fiscal",
        "preliminary",
        "sharp",
        "modest",
        "global",
        "domestic",
        "weaker",
        "stronger",
        "record",
    ],
    adv: &["sharply", "slightly", "steadily", "broadly", "unexpectedly"],
    conj: &["as", "after", "while", "although"],
};

fn grammar(r: Register) -> &'static Grammar {
    match r {
        Register::Plain => &PLAIN,
        Register::Chivalric => &CHIVALRIC,
        Register::Newswire => &NEWSWIRE,
    }
}

fn sentence(g: &Grammar, rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    let template = g.templates.choose(rng).unwrap();
    for word in template.split(' ') {
        let pick = |list: &'static [&'static str], rng: &mut ChaCha8Rng| *list.choose(rng).unwrap();
        match word {
            "$s" => out.push(pick(g.subj, rng)),
            "$n" => out.push(pick(g.noun, rng)),
            "$v" => out.push(pick(g.verb, rng)),
            "$a" => out.push(pick(g.adj, rng)),
            "$x" => out.push(pick(g.adv, rng)),
            "$c" => out.push(pick(g.conj, rng)),
            w => out.push(w),
        }
    }
}

/// Roughly `target_tokens` whitespace tokens, one to three sentences per line.
pub fn synth_corpus(register: Register, target_tokens: usize, seed: u64) -> String {
    let g = grammar(register);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    let mut count = 0;
    let mut words = Vec::new();
    while count < target_tokens {
        words.clear();
        for _ in 0..rng.random_range(1..=3) {
            sentence(g, &mut rng, &mut words);
        }
        // Multi-word fillers count as several tokens.
        count += words.iter().map(|w| w.split(' ').count()).sum::<usize>();
        text.push_str(&words.join(" "));
        text.push('\n');
    }
    text
}

/// A steering setup: base LM trained on plain text, and a prior on a
/// disjoint style corpus.
pub struct Setup {
    pub vocab: Vocabulary,
    pub base: ReferenceLm,
    pub style: TokenizedCorpus,
    pub prior: StylePrior,
    pub lexicon: StyleLexicon,
}

pub fn setup(style: Register, tokens: usize) -> Setup {
    let base_text = synth_corpus(Register::Plain, tokens, 11);
    let style_text = synth_corpus(style, tokens, 23);
    let vocab = build_vocabulary(&format!("{base_text}\n{style_text}"), TokenizerSpec::word_level(), 50_000).unwrap();
    let base_corpus = vocab.tokenize_corpus("plain", &base_text);
    let base = ReferenceLm::train(&base_corpus, &vocab, ReferenceLmConfig::default()).unwrap();
    let style_corpus = vocab.tokenize_corpus("style", &style_text);
    let prior = build_prior(&style_corpus, &vocab, SmoothingConfig::default(), MixtureWeights::default()).unwrap();
    let lexicon = StyleLexicon::from_corpus(&style_corpus, 5000);
    Setup { vocab, base, style: style_corpus, prior, lexicon }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
