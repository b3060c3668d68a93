import type { EditorState } from "./state.js";
import { ghostOf } from "./state.js";
import type { Suggestion } from "./types.js";

export const MAX_ROWS = 5;

export interface RowView {
  text: string;
  prob: string; // formatted percentage
}

/** One slice of the note buffer, flagged runs carrying their hover card. */
export interface SegmentView {
  text: string;
  flagged: boolean;
  suggestions: Suggestion[];
}

export interface ViewModel {
  ghost: string | null;
  rows: RowView[];
  segments: SegmentView[];
  toast: string | null;
  status: string;
}

function formatProb(p: number): string {
  return (100 * p).toFixed(1) + "%";
}

/** The whole UI is a pure function of the editor state. */
export function view(state: EditorState): ViewModel {
  const rows = state.suggestions
    .slice(0, MAX_ROWS)
    .map((s) => ({ text: s.text, prob: formatProb(s.prob) }));

  const segments: SegmentView[] = [];
  let at = 0;
  for (const flag of state.flags) {
    if (flag.start > at) {
      segments.push({ text: state.note.slice(at, flag.start), flagged: false, suggestions: [] });
    }
    segments.push({
      text: state.note.slice(flag.start, flag.end),
      flagged: true,
      suggestions: flag.suggestions,
    });
    at = flag.end;
  }
  if (at < state.note.length) {
    segments.push({ text: state.note.slice(at), flagged: false, suggestions: [] });
  }

  return {
    ghost: ghostOf(state),
    rows,
    segments,
    toast: state.toast,
    status: state.modelId ? `model ${state.modelId}` : "connecting…",
  };
}
