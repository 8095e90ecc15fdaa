"""Prompt templates for the language-model scorer and preference editor.

Every template pins the reply to a single XML tag so parsing stays
mechanical: scores come back as <score>N</score>, preference texts as
<preference>...</preference>. Rendering is pure string formatting; the
same inputs always produce byte-identical prompts.
"""

from __future__ import annotations

from .data import ItemProfile

SCORE_TAG = "score"
PREFERENCE_TAG = "preference"

_RUBRIC = """Use this 1-10 scale:
1 = would actively avoid it
2 = strong mismatch with their taste
3 = mostly uninteresting to them
4 = slight mismatch
5 = indifferent, could go either way
6 = mildly appealing
7 = a good fit
8 = clearly matches their taste
9 = strong match they would seek out
10 = ideal item for this user"""


def _profile_block(profile: ItemProfile) -> str:
    if profile.description:
        return f"Title: {profile.title}\nDescription: {profile.description}"
    return f"Title: {profile.title}"


def render_score_prompt(preference_text: str, profile: ItemProfile) -> str:
    """Ask for a 1-10 integer rating of how well one item fits a user."""
    return f"""Rate how well the item below fits this user's preferences.

{_RUBRIC}

User preferences:
{preference_text}

Item:
{_profile_block(profile)}

Reply with only the integer score wrapped in XML, for example <{SCORE_TAG}>7</{SCORE_TAG}>.
Answer: <{SCORE_TAG}>"""


def render_summary_prompt(profiles: list[ItemProfile]) -> str:
    """Ask for a preference summary from the items a user interacted with."""
    lines = []
    for n, profile in enumerate(profiles, start=1):
        lines.append(f"{n}. {_profile_block(profile)}")
    listing = "\n".join(lines)
    return f"""Summarize what kinds of items this user likes, based on the items
they interacted with. Describe the shared characteristics, not the
individual items.

Items:
{listing}

Reply with the summary wrapped in XML, as <{PREFERENCE_TAG}>...</{PREFERENCE_TAG}>.
Answer: <{PREFERENCE_TAG}>"""


def render_removal_prompt(preference_text: str, profile: ItemProfile) -> str:
    """The user turned out not to like this item: prune the matching traits."""
    return f"""The user does not actually like the item below, even though it
influenced the preference summary. Rewrite the summary so that the
characteristics tied to this item are removed. Keep everything else.

Current preferences:
{preference_text}

Disliked item:
{_profile_block(profile)}

Reply with the revised summary wrapped in XML, as <{PREFERENCE_TAG}>...</{PREFERENCE_TAG}>.
Answer: <{PREFERENCE_TAG}>"""


def render_addition_prompt(preference_text: str, profile: ItemProfile) -> str:
    """The user turned out to like this item: fold its traits in."""
    return f"""The user likes the item below, but the preference summary does not
reflect it yet. Rewrite the summary so the characteristics of this item
are added. Keep everything else.

Current preferences:
{preference_text}

Liked item:
{_profile_block(profile)}

Reply with the revised summary wrapped in XML, as <{PREFERENCE_TAG}>...</{PREFERENCE_TAG}>.
Answer: <{PREFERENCE_TAG}>"""
