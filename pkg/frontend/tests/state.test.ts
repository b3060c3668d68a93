import { describe, expect, it } from "vitest";
import {
  acceptTop,
  beginCompletion,
  beginScore,
  failCompletion,
  ghostOf,
  initialState,
  insertAtCaret,
  resolveCompletion,
  resolveScore,
  setNote,
  spansFromTokens,
} from "../src/state.js";
import type { TokenRow } from "../src/types.js";

const row = (text: string, flagged = false, suggestions: { text: string; prob: number }[] = []): TokenRow => ({
  text,
  logprob: -1,
  flagged,
  suggestions,
});

describe("request bookkeeping", () => {
  it("allocates monotonically increasing ids", () => {
    let s = initialState();
    const a = beginCompletion(s);
    const b = beginScore(a.state);
    const c = beginCompletion(b.state);
    expect(a.id).toBeLessThan(b.id);
    expect(b.id).toBeLessThan(c.id);
  });

  it("discards a completion that is no longer the newest", () => {
    let s = initialState();
    const first = beginCompletion(s);
    const second = beginCompletion(first.state);
    s = resolveCompletion(second.state, second.id, {
      suggestions: [{ text: "new", prob: 0.5 }],
      model_id: "m:1",
    });
    const after = resolveCompletion(s, first.id, {
      suggestions: [{ text: "old", prob: 0.9 }],
      model_id: "m:1",
    });
    expect(after.suggestions).toEqual([{ text: "new", prob: 0.5 }]);
  });

  it("discards score results when the buffer moved on", () => {
    let s = setNote(initialState(), "Day 3", 5);
    const begun = beginScore(s);
    s = setNote(begun.state, "Day 34", 6);
    const after = resolveScore(s, begun.id, "Day 3", {
      tokens: [row("Day 3", true)],
      model_id: "m:1",
    });
    expect(after.flags).toEqual([]);
  });

  it("failure clears suggestions and raises a toast", () => {
    let s = initialState();
    const begun = beginCompletion(s);
    s = resolveCompletion(begun.state, begun.id, {
      suggestions: [{ text: "x", prob: 0.1 }],
      model_id: "m:1",
    });
    const again = beginCompletion(s);
    const after = failCompletion(again.state, again.id, "service down");
    expect(after.suggestions).toEqual([]);
    expect(after.toast).toBe("service down");
  });
});

describe("spansFromTokens", () => {
  it("maps flagged token runs to exact character offsets", () => {
    const note = "Day 3 vancomycin dose";
    const rows = [
      row("Day "),
      row("3"),
      row(" vanc", true, [{ text: "heparin", prob: 0.4 }]),
      row("omycin", true),
      row(" dose"),
    ];
    expect(rows.map((r) => r.text).join("")).toBe(note);
    const spans = spansFromTokens(rows);
    expect(spans).toHaveLength(1);
    expect(note.slice(spans[0]!.start, spans[0]!.end)).toBe(" vancomycin");
    expect(spans[0]!.suggestions).toEqual([{ text: "heparin", prob: 0.4 }]);
  });

  it("ignores empty token texts and keeps separate runs apart", () => {
    const rows = [row(""), row("a", true), row("-"), row("b", true)];
    const spans = spansFromTokens(rows);
    expect(spans).toEqual([
      { start: 0, end: 1, suggestions: [] },
      { start: 2, end: 3, suggestions: [] },
    ]);
  });
});

describe("buffer edits", () => {
  it("insertAtCaret splices text and shifts later flags", () => {
    let s = setNote(initialState(), "ab cd", 5);
    s = { ...s, flags: [{ start: 3, end: 5, suggestions: [] }], caret: 2 };
    s = insertAtCaret(s, "XY");
    expect(s.note).toBe("abXY cd");
    expect(s.caret).toBe(4);
    expect(s.flags).toEqual([{ start: 5, end: 7, suggestions: [] }]);
  });

  it("setNote drops flags that fall outside the new buffer", () => {
    let s = setNote(initialState(), "long enough text", 0);
    s = { ...s, flags: [{ start: 0, end: 4, suggestions: [] }, { start: 10, end: 16, suggestions: [] }] };
    s = setNote(s, "long en", 7);
    expect(s.flags).toEqual([{ start: 0, end: 4, suggestions: [] }]);
  });

  it("acceptTop inserts the ghost at the caret and clears the list", () => {
    let s = setNote(initialState(), "The patient", 11);
    const begun = beginCompletion(s);
    s = resolveCompletion(begun.state, begun.id, {
      suggestions: [
        { text: " is a", prob: 0.6 },
        { text: " was", prob: 0.2 },
      ],
      model_id: "m:1",
    });
    expect(ghostOf(s)).toBe(" is a");
    s = acceptTop(s);
    expect(s.note).toBe("The patient is a");
    expect(s.caret).toBe(16);
    expect(s.suggestions).toEqual([]);
  });

  it("acceptTop without suggestions is a no-op", () => {
    const s = setNote(initialState(), "abc", 3);
    expect(acceptTop(s)).toBe(s);
  });
});
