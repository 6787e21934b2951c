"""Built-in 13-text battery for the activation-inertia similarity analysis.

Thirteen variants of one news-style sentence: prefix removals, synonym and
antonym swaps at the beginning, middle and end, plus a duplicate (similarity
anchor) and a maximally-altered row (dissimilarity anchor). Ships embedded so
the inertia pipeline runs with zero external data; a custom battery can be
supplied as a JSON list of {index, text, treatment}.
"""

INERTIA_SAMPLES = [
    {"index": 1, "text": "### Article: Almost one million people visited the city",
     "treatment": "Baseline"},
    {"index": 2, "text": "Article: Almost one million people visited the city",
     "treatment": "Remove beginning token"},
    {"index": 3, "text": "Almost one million people visited the city",
     "treatment": "Remove beginning tokens"},
    {"index": 4, "text": "### Article: Nearly one million people visited the city",
     "treatment": "Modify the word at the beginning of the sequence"},
    {"index": 5, "text": "Nearly one million people visited the city",
     "treatment": "Remove beginning tokens"},
    {"index": 6, "text": "### Article: Less than one million people visited the city",
     "treatment": "Change to antonym"},
    {"index": 7, "text": "Less than one million people visited the city",
     "treatment": "Remove beginning tokens"},
    {"index": 8, "text": "### Article: Almost one million people visited the city",
     "treatment": "Similarity threshold"},
    {"index": 9, "text": "### Article: Almost one million people visited the restaurant",
     "treatment": "Change to synonyms"},
    {"index": 10, "text": "Almost one million people visited the restaurant",
     "treatment": "Modify the word at the end of the sequence"},
    {"index": 11, "text": "Almost one million people visited the planet",
     "treatment": "Modify the word at the end of the sequence"},
    {"index": 12, "text": "Almost one million tourists visited the restaurant",
     "treatment": "Modify the words at the middle and end"},
    {"index": 13, "text": "Almost one million aliens visited the planet",
     "treatment": "Dissimilarity threshold"},
]
