import type {
  CompleteResponse,
  GenerateResponse,
  HealthResponse,
  RecordContextJson,
  ScoreResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the /v1 endpoints; fetch is injectable for tests. */
export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchFn(this.base + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    const payload = await res.json().catch(() => ({}));
    if (!res.ok) {
      const message =
        typeof payload?.error === "string" ? payload.error : `HTTP ${res.status}`;
      throw new ApiError(message, res.status);
    }
    return payload as T;
  }

  complete(
    context: RecordContextJson,
    prefix: string,
    k = 5,
  ): Promise<CompleteResponse> {
    return this.post("/v1/complete", { context, prefix, k });
  }

  score(context: RecordContextJson, note: string): Promise<ScoreResponse> {
    return this.post("/v1/score", { context, note });
  }

  generate(
    context: RecordContextJson,
    beam = 2,
    maxLen = 500,
  ): Promise<GenerateResponse> {
    return this.post("/v1/generate", { context, beam, max_len: maxLen });
  }

  async health(): Promise<HealthResponse> {
    const res = await this.fetchFn(this.base + "/v1/health");
    if (!res.ok) throw new ApiError(`HTTP ${res.status}`, res.status);
    return (await res.json()) as HealthResponse;
  }
}
