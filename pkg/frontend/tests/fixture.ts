// In-memory recording of the rating service, faithful to the HTTP
// contract: blind item payloads, 409 on regrade, 422 out of range.

export const RUBRIC = [
  { grade: 0, criterion: "The area of interest, highlighted in green, does not appear or is completely outside the biopsy." },
  { grade: 1, criterion: "The area of interest is almost entirely outside of the biopsy." },
  { grade: 2, criterion: "The area of interest is both inside and outside the biopsy, but without matching to the shape of the tissue." },
  { grade: 3, criterion: "The area of interest is mostly within the biopsy and matches the shape of tissues of little relevance to tumor staging" },
  { grade: 4, criterion: "The area of interest is mostly within the biopsy and matches the shape of relevant tissues, although also some less relevant ones." },
  { grade: 5, criterion: "The area of interest is completely within the biopsy and fits perfectly with relevant areas such as the carcinoma." },
];

interface StoredItem {
  itemId: string;
  classLabel: string;
  modelId: string; // server-side only, never serialized into payloads
  grade: number | null;
}

export interface FixtureOptions {
  models?: number;
  classes?: string[];
  imagesPerClass?: number;
  leakModelId?: boolean;
  failNextPost?: () => boolean;
}

export class FixtureServer {
  items: StoredItem[] = [];
  sessionId = "001";
  postCount = 0;
  private leak: boolean;
  private failNextPost: () => boolean;

  constructor(options: FixtureOptions = {}) {
    const models = options.models ?? 3;
    const classes = options.classes ?? ["Basal", "LuminalA", "LuminalB"];
    const perClass = options.imagesPerClass ?? 3;
    this.leak = options.leakModelId ?? false;
    this.failNextPost = options.failNextPost ?? (() => false);
    let index = 0;
    for (let m = 0; m < models; m++) {
      for (const label of classes) {
        for (let i = 0; i < perClass; i++) {
          this.items.push({
            itemId: `item-${String(index).padStart(3, "0")}`,
            classLabel: label,
            modelId: `trial-${m}`,
            grade: null,
          });
          index += 1;
        }
      }
    }
    // deterministic blind shuffle
    for (let i = this.items.length - 1; i > 0; i--) {
      const j = (i * 7919 + 13) % (i + 1);
      [this.items[i], this.items[j]] = [this.items[j], this.items[i]];
    }
    this.items.forEach((item, pos) => {
      item.itemId = `item-${String(pos).padStart(3, "0")}`;
    });
  }

  get complete(): boolean {
    return this.items.every((item) => item.grade !== null);
  }

  private payload(item: StoredItem): Record<string, unknown> {
    const doc: Record<string, unknown> = {
      itemId: item.itemId,
      originalUrl: `/images/renders/${item.itemId}_orig.png`,
      segmentationUrl: `/images/renders/${item.itemId}_seg.png`,
      explanationUrl: `/images/renders/${item.itemId}_lime.png`,
      classLabel: item.classLabel,
      graded: item.grade !== null,
    };
    if (this.leak) {
      doc.modelId = item.modelId;
    }
    return doc;
  }

  fetch = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    const url = String(input);
    const json = (body: unknown, status = 200) =>
      new Response(JSON.stringify(body), {
        status,
        headers: { "Content-Type": "application/json" },
      });

    if (url.endsWith("/api/v1/rubric")) {
      return json(RUBRIC);
    }
    if (url.endsWith("/api/v1/sessions/open")) {
      return json(this.complete ? [] : [this.sessionId]);
    }
    const gradeMatch = url.match(/\/api\/v1\/sessions\/([^/]+)\/items\/([^/]+)\/grade$/);
    if (gradeMatch && init?.method === "POST") {
      this.postCount += 1;
      if (this.failNextPost()) {
        throw new TypeError("fetch failed");
      }
      const item = this.items.find((i) => i.itemId === gradeMatch[2]);
      if (!item) {
        return json({ error: "UnknownItem", detail: "no such item" }, 404);
      }
      const body = JSON.parse(String(init.body)) as { grade: unknown };
      const grade = body.grade;
      if (typeof grade !== "number" || !Number.isInteger(grade) || grade < 0 || grade > 5) {
        return json({ error: "GradeOutOfRange", detail: "grade must be 0..5" }, 422);
      }
      if (item.grade !== null) {
        return json({ error: "AlreadyGraded", detail: "already graded" }, 409);
      }
      item.grade = grade;
      return json({ ok: true, itemId: item.itemId });
    }
    const sessionMatch = url.match(/\/api\/v1\/sessions\/([^/]+)$/);
    if (sessionMatch) {
      if (sessionMatch[1] !== this.sessionId) {
        return json({ error: "UnknownSession", detail: "no such session" }, 404);
      }
      return json({
        sessionId: this.sessionId,
        status: this.complete ? "complete" : "open",
        createdAt: "2000-01-01T00:00:00+00:00",
        rubric: RUBRIC,
        items: this.items.map((item) => this.payload(item)),
      });
    }
    return json({ error: "UnknownRoute", detail: url }, 404);
  };
}
