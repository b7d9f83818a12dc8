// Generated by tests/oracle/metrics_oracle.py from independent references (official SQuAD v2.0
// normalization, nltk sentence_bleu, textbook LCS). Do not edit by hand.

pub const SQUAD_CASES: &[(&str, &[&str], f64, f64)] = &[
    ("the cat sat", &["cat sat"], 1.0, 1.0),
    ("Cat sat.", &["cat sat"], 1.0, 1.0),
    ("a cat", &["the dog"], 0.0, 0.0),
    ("New York City", &["new york", "York City"], 0.0, 0.8),
    ("the the cat", &["cat cat"], 0.0, 0.6666666666666666),
    ("", &[], 1.0, 1.0),
    ("something", &[], 0.0, 0.0),
    ("1,000 dollars", &["1000 dollars"], 1.0, 1.0),
    ("red blue green", &["green blue red yellow"], 0.0, 0.8571428571428571),
    ("an apple a day", &["apple day"], 1.0, 1.0),
    ("Café au lait!", &["café au lait"], 1.0, 1.0),
    ("x y z", &["x", "y z w"], 0.0, 0.6666666666666666),
    ("theory of everything", &["the theory"], 0.0, 0.5),
    ("Anne's book", &["annes book"], 1.0, 1.0),
];

pub const ROUGE_CASES: &[(&str, &str, f64, f64)] = &[
    ("a b c d", "a c d", 1.2, 0.8798076923076923),
    ("a b c d", "a b c d", 1.2, 1.0),
    ("a b", "c d", 1.2, 0.0),
    ("", "a", 1.2, 0.0),
    ("a b a b", "b a b a", 1.2, 0.75),
    ("the cat sat on the mat", "the cat is on the mat", 1.2, 0.8333333333333334),
    ("x", "x y z", 1.2, 0.45864661654135336),
    ("a b c", "c b a", 1.2, 0.3333333333333333),
    ("one two three four five six", "two four six eight", 1.2, 0.6224489795918368),
    ("a b c d", "a c d", 1.0, 0.8571428571428571),
    ("a b c d", "a c d", 2.0, 0.9375),
    ("p q r s t", "q s", 1.2, 0.6192893401015228),
];

/// Predictions of at least four tokens, checked against nltk with smoothing
/// method 2 (add one to n-gram counts for n >= 2).
pub const BLEU_CASES: &[(&str, &str, f64)] = &[
    ("the cat sat on the mat", "the cat sat on the mat", 1.0),
    ("the cat sat on the mat", "the cat is on the mat", 0.48549177170732344),
    ("a b c d e", "a b c x e", 0.5318295896944989),
    ("one two three four", "one two three four five six", 0.6065306597126334),
    ("one two three four five six seven", "one two three", 0.33265096878635064),
    ("w x y z", "a b c d", 0.0),
    ("the quick brown fox jumps", "the fast brown fox jumps", 0.5318295896944989),
    ("a a a a a", "a a b", 0.33980884896942454),
    ("x y z w v u", "v u x y", 0.35930411196308426),
    ("m n o p", "p o n m", 0.4518010018049224),
    ("alpha beta gamma delta epsilon", "beta gamma delta", 0.4949232003839765),
    ("red green blue red green", "red green blue", 0.4949232003839765),
];

/// Predictions shorter than four tokens, where the empty higher-order
/// n-gram sets count as (0 + 1) / (0 + 1).
pub const SHORT_BLEU_CASES: &[(&str, &str, f64)] = &[
    ("a b", "a b", 1.0),
    ("x", "x", 1.0),
    ("a b c", "a b", 0.6865890479690392),
    ("a", "a b c", 0.1353352832366127),
    ("", "a", 0.0),
    ("q", "r", 0.0),
    ("a b", "b a", 0.8408964152537145),
];

/// (items, threshold, tp, fp, fn, precision, recall, f1)
pub const PRF_CASES: &[(&[(f64, bool)], f64, usize, usize, usize, f64, f64, f64)] = &[
    (&[(0.95, true), (0.05, false), (0.09, false), (0.91, true), (0.09, false), (0.24, false), (0.06, false), (0.95, false)], 0.0, 2, 6, 0, 0.25, 1.0, 0.4),
    (&[(0.59, true), (0.22, false), (0.13, false), (0.54, false), (0.56, false), (0.1, false), (0.19, true), (0.71, false), (0.62, false), (0.53, false), (0.47, false), (0.36, true)], 0.3, 2, 6, 1, 0.25, 0.6666666666666666, 0.36363636363636365),
    (&[(0.08, true), (0.5, true), (0.45, false), (0.07, false), (0.16, true), (0.93, false)], 0.0, 3, 3, 0, 0.5, 1.0, 0.6666666666666666),
    (&[(0.57, false), (0.31, false), (0.59, false), (0.46, false), (0.94, false), (0.66, true), (0.7, false), (0.99, false), (0.28, true), (0.67, true), (0.46, true)], 0.0, 4, 7, 0, 0.36363636363636365, 1.0, 0.5333333333333333),
    (&[(0.06, false), (0.13, true), (0.39, false), (0.08, false), (0.55, false), (0.82, false), (0.28, false), (0.36, false), (0.96, true), (0.18, true)], 0.3, 1, 4, 2, 0.2, 0.3333333333333333, 0.25),
    (&[(0.48, false), (0.26, true), (0.42, true)], 0.5, 0, 0, 2, 0.0, 0.0, 0.0),
    (&[(0.69, false), (0.62, false), (0.05, false), (0.78, false), (0.8, true)], 0.75, 1, 1, 0, 0.5, 1.0, 0.6666666666666666),
    (&[(0.1, false), (0.06, true), (0.21, true), (0.34, true), (0.0, true), (0.1, true), (0.03, false), (0.61, true), (0.25, true)], 0.5, 1, 0, 6, 1.0, 0.14285714285714285, 0.25),
    (&[(0.12, false), (0.99, false), (0.48, true), (0.1, true), (0.26, false), (0.16, true), (0.95, false), (0.15, false), (0.03, false), (0.98, false)], 0.5, 0, 3, 3, 0.0, 0.0, 0.0),
    (&[(0.37, true), (0.77, false), (0.78, true), (0.22, false), (0.98, false), (0.81, false), (0.74, true), (0.52, true), (0.03, true), (0.28, true), (0.69, false)], 0.75, 1, 3, 5, 0.25, 0.16666666666666666, 0.2),
    (&[(0.96, true), (0.22, true), (0.2, true), (0.62, false), (0.84, false), (0.65, false), (0.08, false), (0.91, false)], 0.3, 1, 4, 2, 0.2, 0.3333333333333333, 0.25),
    (&[(0.89, false), (0.64, true), (0.95, false), (0.46, false), (0.08, true), (0.99, true), (0.59, false), (0.66, false), (0.6, false), (0.94, true)], 0.3, 3, 6, 1, 0.3333333333333333, 0.75, 0.46153846153846156),
];

/// (em, f1, rouge_l, bleu4, precision, recall, f1, accuracy, answerable_em, answerable_f1)
pub const DATASET_EXPECTED: [f64; 10] = [0.5, 0.7, 0.7074829931972789, 0.6716472619922598, 1.0, 0.5, 0.6666666666666666, 0.75, 0.5, 0.9];
