"""Instruction templates prepended to queries (and to passages of symmetric tasks)."""
from __future__ import annotations

from .errors import InputError

RETRIEVAL = "Given a query, retrieve documents that answer the query."
STS = "Retrieve semantically similar text"
CLASSIFICATION = "Categorizing the given text"


def format_query(instruction: str, query: str) -> str:
    """Render ``Instruct: {instruction} \\n Query: {query}``; bare query if no instruction."""
    if not query or not query.strip():
        raise InputError("query must be nonempty")
    if not instruction:
        return query
    return f"Instruct: {instruction} \n Query: {query}"
