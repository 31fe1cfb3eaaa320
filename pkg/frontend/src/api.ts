// Typed client for the rating service. The fetch function is injected so
// tests can run against recorded fixtures.

export interface RubricRow {
  grade: number;
  criterion: string;
}

export interface ApiItem {
  itemId: string;
  originalUrl: string;
  segmentationUrl: string;
  explanationUrl: string;
  classLabel: string;
  graded: boolean;
}

export interface ApiSession {
  sessionId: string;
  status: "open" | "complete";
  createdAt: string;
  rubric: RubricRow[];
  items: ApiItem[];
}

export type GradeResult =
  | { kind: "ok" }
  | { kind: "conflict"; detail: string }
  | { kind: "rejected"; detail: string }
  | { kind: "network"; detail: string };

const ITEM_KEYS = new Set([
  "itemId",
  "originalUrl",
  "segmentationUrl",
  "explanationUrl",
  "classLabel",
  "graded",
]);

/** Blind-rating guard: item payloads must never identify the model. */
export function assertBlindItem(raw: Record<string, unknown>): ApiItem {
  for (const key of Object.keys(raw)) {
    if (!ITEM_KEYS.has(key)) {
      throw new Error(`item payload leaks unexpected field "${key}"`);
    }
  }
  for (const key of ["itemId", "originalUrl", "segmentationUrl", "explanationUrl", "classLabel"]) {
    if (typeof raw[key] !== "string") {
      throw new Error(`item payload missing "${key}"`);
    }
  }
  return raw as unknown as ApiItem;
}

export class Api {
  constructor(
    private fetchFn: typeof fetch,
    private base: string = "",
  ) {}

  private async getJson(path: string): Promise<unknown> {
    const res = await this.fetchFn(`${this.base}${path}`);
    if (!res.ok) {
      throw new Error(`GET ${path} failed with ${res.status}`);
    }
    return res.json();
  }

  async rubric(): Promise<RubricRow[]> {
    return (await this.getJson("/api/v1/rubric")) as RubricRow[];
  }

  async openSessions(): Promise<string[]> {
    return (await this.getJson("/api/v1/sessions/open")) as string[];
  }

  async session(id: string): Promise<ApiSession> {
    const doc = (await this.getJson(`/api/v1/sessions/${id}`)) as ApiSession;
    doc.items = doc.items.map((item) =>
      assertBlindItem(item as unknown as Record<string, unknown>),
    );
    return doc;
  }

  async submitGrade(
    sessionId: string,
    itemId: string,
    grade: number,
    comment?: string,
  ): Promise<GradeResult> {
    let res: Response;
    try {
      res = await this.fetchFn(
        `${this.base}/api/v1/sessions/${sessionId}/items/${itemId}/grade`,
        {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify(comment ? { grade, comment } : { grade }),
        },
      );
    } catch (err) {
      return { kind: "network", detail: String(err) };
    }
    if (res.ok) {
      return { kind: "ok" };
    }
    let detail = `HTTP ${res.status}`;
    try {
      const body = (await res.json()) as { detail?: string };
      if (body.detail) {
        detail = body.detail;
      }
    } catch {
      // keep the status text
    }
    if (res.status === 409) {
      return { kind: "conflict", detail };
    }
    return { kind: "rejected", detail };
  }
}
