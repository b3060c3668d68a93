// JSON shapes shared with the note service's /v1 endpoints.

export interface LabJson {
  label: string;
  value: string;
  unit: string;
  flag: string;
}

export interface RecordContextJson {
  hint: string;
  note_type: string;
  gender: string;
  age_years: number;
  meds: string[];
  labs: LabJson[];
  past_notes: string[];
}

export interface Suggestion {
  text: string;
  prob: number;
}

/** One note token as scored by /v1/score; text carries the exact bytes. */
export interface TokenRow {
  text: string;
  logprob: number;
  flagged: boolean;
  suggestions: Suggestion[];
}

export interface CompleteResponse {
  suggestions: Suggestion[];
  model_id: string;
}

export interface ScoreResponse {
  tokens: TokenRow[];
  model_id: string;
}

export interface GenerateResponse {
  note: string;
  logprob: number;
  model_id: string;
}

export interface HealthResponse {
  status: "ready" | "loading";
  model_id: string | null;
}

/** A run of flagged tokens mapped to character offsets in the note buffer. */
export interface FlagSpan {
  start: number;
  end: number;
  suggestions: Suggestion[];
}
