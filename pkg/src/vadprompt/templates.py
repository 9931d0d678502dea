"""Inference prompt templates and the markers used to recognise them."""

from __future__ import annotations

ABSTRACT_PROMPT = (
    "Please analyze the following video step-by-step and determine whether it contains abnormal behavior.\n"
    "Answer Yes or No with a short description on the video.\n"
)

CLASS_LABEL_WITH_GROUPS = (
    "Considering the following group knowledge:\n"
    "{groups}\n"
    "\n"
    "Based on the understanding, does this video depict a {target} event?\n"
    "Answer Yes or No, and explain briefly.\n"
)

CLASS_LABEL_PLAIN = "Is this video showing {target}?\nAnswer Yes or No, and explain briefly.\n"

GROUPED_TEMPLATE = (
    "Task 1: Binary Decision.\n"
    "Using the guiding questions below, classify the video as Normal or Abnormal.\n"
    "\n"
    "Task 2: Group Classification (if Abnormal).\n"
    "Based on the questions, assign the video to one of the following groups of questions:\n"
    "\n"
    "{groups}\n"
    "\n"
    "Answer Format:\n"
    "- Normal Event. [short reason]\n"
    "- Abnormal Event → [Group]. [short reason]\n"
)

FLAT_TEMPLATE = (
    "Instruction: You are analyzing one surveillance or online video.\n"
    "\n"
    "Task 1: Decide if the video is Normal or Abnormal.\n"
    "\n"
    "Task 2: If Abnormal, consider the following guiding questions to identify violent or hazardous events:\n"
    "\n"
    "{questions}\n"
    "\n"
    "Answer format:\n"
    "- \"Normal Event. [short reason]\"\n"
    "- \"Abnormal Event. [short reason referencing {qrange}]\"\n"
)

# substrings that identify which template produced a prompt
MARK_FULL_POOL = "Return ONLY raw JSON"
MARK_ABSTRACT = "determine whether it contains abnormal behavior"
MARK_CLASS_LABEL = ("does this video depict a ", "Is this video showing ")
MARK_GENERATION = "Anomaly Classes:"
MARK_COMPRESSION = "Grouped Guiding Questions:"


def prompt_kind(prompt: str) -> str:
    """One of ``full_pool``, ``abstract``, ``class_label``, ``askhint``."""
    if MARK_FULL_POOL in prompt:
        return "full_pool"
    if MARK_ABSTRACT in prompt:
        return "abstract"
    if any(m in prompt for m in MARK_CLASS_LABEL):
        return "class_label"
    return "askhint"


def class_label_target(prompt: str) -> str | None:
    for marker in MARK_CLASS_LABEL:
        start = prompt.find(marker)
        if start < 0:
            continue
        rest = prompt[start + len(marker):]
        end = rest.find(" event?") if "depict" in marker else rest.find("?")
        if end >= 0:
            return rest[:end].strip()
    return None
